//! Patch embedder, projector, two-block pre-norm decoder and classifier.

use std::collections::BTreeMap;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::compressor::{project, Projector, ProjectorDims, ProjectorKind, VisualTokens, LN_EPS};
use crate::error::{Error, Result};
use crate::lora::{linear, lora_forward, AdapterRegistry, LinearParams, LoraAdapter, LoraConfig};
use crate::params::{join, param_struct, Bind, Binding, ParamSet};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_v: usize,
    pub d_t: usize,
    pub d_h: usize,
    pub n1: usize,
    pub k: usize,
    pub text_len: usize,
    pub vocab: usize,
    pub classes: usize,
    pub decoder_blocks: usize,
    /// Decoder MLP hidden width as a multiple of `d_t`.
    pub mlp_ratio: usize,
    pub projector: ProjectorKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_v: 8,
            d_t: 16,
            d_h: 32,
            n1: 16,
            k: 4,
            text_len: 4,
            vocab: 16,
            classes: 2,
            decoder_blocks: 2,
            mlp_ratio: 2,
            projector: ProjectorKind::HybridCompressor,
        }
    }
}

impl ModelConfig {
    pub fn projector_dims(&self) -> ProjectorDims {
        ProjectorDims {
            d_v: self.d_v,
            k: self.k,
            d_h: self.d_h,
            d_t: self.d_t,
        }
    }

    /// `N2 = ceil(N1 / k)`.
    pub fn n2(&self) -> usize {
        self.n1.div_ceil(self.k.max(1))
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_v", self.d_v),
            ("d_t", self.d_t),
            ("d_h", self.d_h),
            ("n1", self.n1),
            ("k", self.k),
            ("text_len", self.text_len),
            ("vocab", self.vocab),
            ("mlp_ratio", self.mlp_ratio),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::Config {
                    key: Some(key.into()),
                    line: None,
                    msg: "must be positive".into(),
                });
            }
        }
        if self.classes < 2 {
            return Err(Error::Config {
                key: Some("classes".into()),
                line: None,
                msg: "need at least two classes".into(),
            });
        }
        Ok(())
    }
}

param_struct! {
    pub struct NormParams {
        pub gamma,
        pub beta,
    }
}

impl NormParams {
    fn new(d: usize) -> Self {
        NormParams {
            gamma: Tensor::ones(&[d]),
            beta: Tensor::zeros(&[d]),
        }
    }
}

/// Pre-norm block: attention then a GELU MLP, each with a residual.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<T = Tensor> {
    pub ln1: NormParams<T>,
    pub attn_q: LinearParams<T>,
    pub attn_k: LinearParams<T>,
    pub attn_v: LinearParams<T>,
    pub attn_o: LinearParams<T>,
    pub ln2: NormParams<T>,
    pub mlp_in: LinearParams<T>,
    pub mlp_out: LinearParams<T>,
}

/// Names of the linear maps inside a block, which are the LoRA targets.
pub const BLOCK_LINEARS: [&str; 6] = ["attn_q", "attn_k", "attn_v", "attn_o", "mlp_in", "mlp_out"];

impl BlockParams {
    fn init<R: RngCore>(rng: &mut R, d: usize, hidden: usize) -> Self {
        BlockParams {
            ln1: NormParams::new(d),
            attn_q: LinearParams::init(rng, d, d),
            attn_k: LinearParams::init_unbiased(rng, d, d),
            attn_v: LinearParams::init(rng, d, d),
            attn_o: LinearParams::init(rng, d, d),
            ln2: NormParams::new(d),
            mlp_in: LinearParams::init(rng, d, hidden),
            mlp_out: LinearParams::init(rng, hidden, d),
        }
    }

    fn linears(&self) -> [(&'static str, &LinearParams); 6] {
        [
            ("attn_q", &self.attn_q),
            ("attn_k", &self.attn_k),
            ("attn_v", &self.attn_v),
            ("attn_o", &self.attn_o),
            ("mlp_in", &self.mlp_in),
            ("mlp_out", &self.mlp_out),
        ]
    }
}

impl ParamSet for BlockParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.ln1.visit(&join(prefix, "ln1"), f);
        self.ln2.visit(&join(prefix, "ln2"), f);
        for (name, lin) in self.linears() {
            lin.visit(&join(prefix, name), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.ln1.visit_mut(&join(prefix, "ln1"), f);
        self.ln2.visit_mut(&join(prefix, "ln2"), f);
        self.attn_q.visit_mut(&join(prefix, "attn_q"), f);
        self.attn_k.visit_mut(&join(prefix, "attn_k"), f);
        self.attn_v.visit_mut(&join(prefix, "attn_v"), f);
        self.attn_o.visit_mut(&join(prefix, "attn_o"), f);
        self.mlp_in.visit_mut(&join(prefix, "mlp_in"), f);
        self.mlp_out.visit_mut(&join(prefix, "mlp_out"), f);
    }
}

impl Bind for BlockParams {
    type Bound = BlockParams<Var>;

    fn bind(&self, prefix: &str, tape: &mut Tape, binding: &mut Binding) -> Self::Bound {
        BlockParams {
            ln1: self.ln1.bind(&join(prefix, "ln1"), tape, binding),
            attn_q: self.attn_q.bind(&join(prefix, "attn_q"), tape, binding),
            attn_k: self.attn_k.bind(&join(prefix, "attn_k"), tape, binding),
            attn_v: self.attn_v.bind(&join(prefix, "attn_v"), tape, binding),
            attn_o: self.attn_o.bind(&join(prefix, "attn_o"), tape, binding),
            ln2: self.ln2.bind(&join(prefix, "ln2"), tape, binding),
            mlp_in: self.mlp_in.bind(&join(prefix, "mlp_in"), tape, binding),
            mlp_out: self.mlp_out.bind(&join(prefix, "mlp_out"), tape, binding),
        }
    }
}

/// Decoder stand-in for the language backbone.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams<T = Tensor> {
    /// `[vocab x d_t]`
    pub text_embed: T,
    pub blocks: Vec<BlockParams<T>>,
    pub head: LinearParams<T>,
}

impl ParamSet for DecoderParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(join(prefix, "text_embed"), &self.text_embed);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("block{i}")), f);
        }
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "text_embed"), &mut self.text_embed);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("block{i}")), f);
        }
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

impl Bind for DecoderParams {
    type Bound = DecoderParams<Var>;

    fn bind(&self, prefix: &str, tape: &mut Tape, binding: &mut Binding) -> Self::Bound {
        DecoderParams {
            text_embed: binding.bind(tape, &join(prefix, "text_embed"), &self.text_embed),
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(i, b)| b.bind(&join(prefix, &format!("block{i}")), tape, binding))
                .collect(),
            head: self.head.bind(&join(prefix, "head"), tape, binding),
        }
    }
}

/// The full toy vision-language classifier plus its LoRA adapter sets.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyModel {
    pub config: ModelConfig,
    /// Token-wise `d_v -> d_v` map standing in for the vision encoder.
    pub embed: LinearParams,
    pub projector: Projector,
    pub decoder: DecoderParams,
    pub adapters: AdapterRegistry,
}

/// A [`ToyModel`] bound onto a tape.
pub struct BoundModel {
    pub embed: LinearParams<Var>,
    pub projector: Projector<Var>,
    pub decoder: DecoderParams<Var>,
    /// Active adapters keyed by target name.
    pub lora: BTreeMap<String, LoraAdapter<Var>>,
    pub k: usize,
}

/// Outputs of one forward pass.
pub struct ForwardOutput {
    /// `[1 x C]`
    pub logits: Var,
    pub visual: VisualTokens<Var>,
}

impl ToyModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_t;
        let embed = LinearParams::init(&mut rng, config.d_v, config.d_v);
        let projector = Projector::init(&mut rng, config.projector, &config.projector_dims());
        let text_embed = Tensor::uniform(&[config.vocab, d], 1.0, &mut rng);
        let blocks = (0..config.decoder_blocks)
            .map(|_| BlockParams::init(&mut rng, d, d * config.mlp_ratio))
            .collect();
        let head = LinearParams::init(&mut rng, d, config.classes);
        Ok(ToyModel {
            config,
            embed,
            projector,
            decoder: DecoderParams {
                text_embed,
                blocks,
                head,
            },
            adapters: AdapterRegistry::new(),
        })
    }

    /// Assembles a model from parts, checking that token widths agree.
    pub fn from_parts(
        config: ModelConfig,
        embed: LinearParams,
        projector: Projector,
        decoder: DecoderParams,
    ) -> Result<Self> {
        config.validate()?;
        let width_err = |what: &str, got: usize| Error::Config {
            key: Some("d_t".into()),
            line: None,
            msg: format!("{what} width {got} differs from decoder width {}", config.d_t),
        };
        let probe = {
            let mut tape = Tape::new();
            let bound = projector.bind("", &mut tape, &mut Binding::frozen());
            let e = tape.constant(Tensor::zeros(&[config.k, config.d_v]));
            project(&mut tape, e, &bound, config.k)
                .map(|v| tape.value(v.values).shape()[1])
                .map_err(|e| Error::config(format!("projector does not accept d_v = {}: {e}", config.d_v)))?
        };
        if probe != config.d_t {
            return Err(width_err("projector output", probe));
        }
        let (_, text_w) = decoder.text_embed.dims2()?;
        if text_w != config.d_t {
            return Err(width_err("text embedding", text_w));
        }
        if embed.dims() != (config.d_v, config.d_v) {
            return Err(Error::config(format!(
                "patch embedder {:?} for d_v = {}",
                embed.weight.shape(),
                config.d_v
            )));
        }
        Ok(ToyModel {
            config,
            embed,
            projector,
            decoder,
            adapters: AdapterRegistry::new(),
        })
    }

    /// `(target, d_in, d_out)` for every decoder linear map.
    pub fn lora_targets(&self) -> Vec<(String, usize, usize)> {
        let mut out = Vec::new();
        for (i, block) in self.decoder.blocks.iter().enumerate() {
            for (name, lin) in block.linears() {
                let (d_in, d_out) = lin.dims();
                out.push((format!("decoder.block{i}.{name}"), d_in, d_out));
            }
        }
        out
    }

    /// Adds a fresh adapter set over every decoder linear map.
    pub fn add_adapter_set(&mut self, name: &str, cfg: &LoraConfig, seed: u64) -> Result<()> {
        let targets = self.lora_targets();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.adapters.add_set(name, &targets, cfg, &mut rng)
    }

    pub fn bind(&self, tape: &mut Tape, binding: &mut Binding) -> BoundModel {
        BoundModel {
            embed: self.embed.bind("embed", tape, binding),
            projector: self.projector.bind("projector", tape, binding),
            decoder: self.decoder.bind("decoder", tape, binding),
            lora: self.adapters.bind_active(tape, binding),
            k: self.config.k,
        }
    }

    /// Evaluation-mode logits for one sample.
    pub fn predict(&self, embeddings: &Tensor, text: &[usize]) -> Result<(Tensor, VisualTokens)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, &mut Binding::frozen());
        let e = tape.constant(embeddings.clone());
        let out = model_forward(&mut tape, &bound, e, text, None)?;
        Ok((tape.value(out.logits).clone(), out.visual.resolve(&tape)))
    }
}

impl ParamSet for ToyModel {
    fn visit<'a>(&'a self, _prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.embed.visit("embed", f);
        self.projector.visit("projector", f);
        self.decoder.visit("decoder", f);
        self.adapters.visit("", f);
    }

    fn visit_mut(&mut self, _prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.embed.visit_mut("embed", f);
        self.projector.visit_mut("projector", f);
        self.decoder.visit_mut("decoder", f);
        self.adapters.visit_mut("", f);
    }
}

impl Bind for ToyModel {
    type Bound = BoundModel;

    fn bind(&self, _prefix: &str, tape: &mut Tape, binding: &mut Binding) -> BoundModel {
        ToyModel::bind(self, tape, binding)
    }
}

fn adapted_linear(
    tape: &mut Tape,
    x: Var,
    base: &LinearParams<Var>,
    target: &str,
    lora: &BTreeMap<String, LoraAdapter<Var>>,
    dropout: &mut Option<&mut dyn RngCore>,
) -> Result<Var> {
    match lora.get(target) {
        Some(adapter) => {
            let rng = dropout.as_mut().map(|r| &mut **r as &mut dyn RngCore);
            lora_forward(tape, x, base, adapter, rng)
        }
        None => linear(tape, x, base),
    }
}

fn block_forward(
    tape: &mut Tape,
    x: Var,
    p: &BlockParams<Var>,
    prefix: &str,
    lora: &BTreeMap<String, LoraAdapter<Var>>,
    dropout: &mut Option<&mut dyn RngCore>,
) -> Result<Var> {
    let h = tape.layer_norm(x, p.ln1.gamma, p.ln1.beta, LN_EPS)?;
    let q = adapted_linear(tape, h, &p.attn_q, &join(prefix, "attn_q"), lora, dropout)?;
    let k = adapted_linear(tape, h, &p.attn_k, &join(prefix, "attn_k"), lora, dropout)?;
    let v = adapted_linear(tape, h, &p.attn_v, &join(prefix, "attn_v"), lora, dropout)?;
    let a = tape.attention(q, k, v)?;
    let o = adapted_linear(tape, a, &p.attn_o, &join(prefix, "attn_o"), lora, dropout)?;
    let x = tape.add(x, o)?;
    let h = tape.layer_norm(x, p.ln2.gamma, p.ln2.beta, LN_EPS)?;
    let m = adapted_linear(tape, h, &p.mlp_in, &join(prefix, "mlp_in"), lora, dropout)?;
    let m = tape.gelu(m);
    let m = adapted_linear(tape, m, &p.mlp_out, &join(prefix, "mlp_out"), lora, dropout)?;
    tape.add(x, m)
}

/// `V = projector(embed(E))`, tokens `[V; text]`, decoder blocks, mean pool,
/// classifier head.
///
/// `dropout` enables LoRA-path dropout (training only).
pub fn model_forward(
    tape: &mut Tape,
    model: &BoundModel,
    embeddings: Var,
    text: &[usize],
    dropout: Option<&mut dyn RngCore>,
) -> Result<ForwardOutput> {
    let vocab = tape.value(model.decoder.text_embed).shape()[0];
    if let Some(&bad) = text.iter().find(|&&t| t >= vocab) {
        return Err(Error::Index(format!("text id {bad} outside vocabulary of {vocab}")));
    }
    let e = linear(tape, embeddings, &model.embed)?;
    let visual = project(tape, e, &model.projector, model.k)?;
    let logits = decoder_forward(tape, &model.decoder, &model.lora, visual.values, text, dropout)?;
    Ok(ForwardOutput { logits, visual })
}

/// Decoder pass over `[visual; text]` rows, mean-pooled into `[1 x classes]`
/// logits. `lora` holds the bound adapters of the active set, keyed by target.
pub fn decoder_forward(
    tape: &mut Tape,
    decoder: &DecoderParams<Var>,
    lora: &BTreeMap<String, LoraAdapter<Var>>,
    visual: Var,
    text: &[usize],
    mut dropout: Option<&mut dyn RngCore>,
) -> Result<Var> {
    let t = tape.gather_rows(decoder.text_embed, text)?;
    let mut x = tape.concat_rows(&[visual, t])?;
    for (i, block) in decoder.blocks.iter().enumerate() {
        x = block_forward(tape, x, block, &format!("decoder.block{i}"), lora, &mut dropout)?;
    }
    let pooled = tape.mean_rows(x)?;
    linear(tape, pooled, &decoder.head)
}
