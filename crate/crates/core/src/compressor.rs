//! Visual-token projectors: the gated two-expert hybrid compressor and the
//! plain-MLP and fusion baselines.
//!
//! Every projector first merges `k` consecutive visual embeddings into one
//! `k * d_v` wide token, then maps it to the decoder width `d_t`, so an
//! `[N1 x d_v]` input always becomes `[ceil(N1 / k) x d_t]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{join, param_struct, Bind, Binding, ParamSet};
use crate::tensor::Tensor;

/// Layer-norm epsilon used by the experts.
pub const LN_EPS: f64 = 1e-5;

/// Gate value recorded by projectors that have no gate.
pub const NO_GATE: f64 = 0.5;

/// Where a visual embedding came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TokenSource {
    Original,
    KeyFrame,
}

/// Vision-encoder output `[N1 x d_v]` with a source tag per token.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualEmbeddings {
    pub values: Tensor,
    pub sources: Vec<TokenSource>,
}

impl VisualEmbeddings {
    pub fn new(values: Tensor) -> Result<Self> {
        let (n, _) = values.dims2()?;
        Ok(VisualEmbeddings {
            values,
            sources: vec![TokenSource::Original; n],
        })
    }

    pub fn with_sources(values: Tensor, sources: Vec<TokenSource>) -> Result<Self> {
        let (n, _) = values.dims2()?;
        if sources.len() != n {
            return Err(Error::dim(
                "visual_embeddings",
                format!("{} source tags for {n} tokens", sources.len()),
            ));
        }
        Ok(VisualEmbeddings { values, sources })
    }

    pub fn num_tokens(&self) -> usize {
        self.sources.len()
    }
}

/// Compressed visual tokens together with the emotion-expert weight used for
/// each token.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualTokens<T = Tensor> {
    /// `[N2 x d_t]`
    pub values: T,
    /// `[N2 x 1]` on the tape, `[N2]` once resolved.
    pub gate_trace: T,
}

impl VisualTokens<Var> {
    pub fn resolve(&self, tape: &Tape) -> VisualTokens {
        let gate = tape.value(self.gate_trace);
        VisualTokens {
            values: tape.value(self.values).clone(),
            gate_trace: Tensor::vector(gate.data().to_vec()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProjectorKind {
    Mlp,
    Fusion,
    HybridCompressor,
}

impl ProjectorKind {
    pub fn name(self) -> &'static str {
        match self {
            ProjectorKind::Mlp => "mlp",
            ProjectorKind::Fusion => "fusion",
            ProjectorKind::HybridCompressor => "hybrid",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mlp" => Some(ProjectorKind::Mlp),
            "fusion" => Some(ProjectorKind::Fusion),
            "hybrid" | "hc" => Some(ProjectorKind::HybridCompressor),
            _ => None,
        }
    }
}

/// Widths shared by all projector variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectorDims {
    /// Vision embedding width.
    pub d_v: usize,
    /// Merge factor.
    pub k: usize,
    /// Hidden width.
    pub d_h: usize,
    /// Output (decoder) width.
    pub d_t: usize,
}

impl ProjectorDims {
    /// Width of a merged token.
    pub fn d_in(&self) -> usize {
        self.k * self.d_v
    }

    /// Number of output tokens for `n1` input embeddings.
    pub fn output_tokens(&self, n1: usize) -> usize {
        n1.div_ceil(self.k)
    }

    fn mlp_count(&self, d_out: usize) -> usize {
        self.d_in() * self.d_h + self.d_h + self.d_h * d_out + d_out
    }

    /// Fusion projector without its ratio head: two parallel MLPs.
    pub fn fusion_core_count(&self) -> usize {
        2 * self.mlp_count(self.d_t)
    }

    /// Closed-form scalar parameter count of a variant.
    pub fn param_count(&self, kind: ProjectorKind) -> usize {
        match kind {
            ProjectorKind::Mlp => self.mlp_count(self.d_t),
            ProjectorKind::Fusion => self.fusion_core_count() + self.mlp_count(1),
            ProjectorKind::HybridCompressor => {
                let expert = self.mlp_count(self.d_t) + 2 * self.d_t;
                let d = self.d_in();
                let gate = 3 * d * d + 2 * d + 2;
                2 * expert + gate
            }
        }
    }
}

param_struct! {
    /// One expert: `layer_norm(gelu(x W' + b') W + b)`.
    pub struct ExpertParams {
        pub w_in,
        pub b_in,
        pub w_out,
        pub b_out,
        pub gamma,
        pub beta,
    }
}

param_struct! {
    /// Attention-based gate producing two logits per token.
    pub struct GateParams {
        pub wq,
        pub wk,
        pub wv,
        pub w_gate,
        pub b_gate,
    }
}

param_struct! {
    /// Two-layer perceptron `act(x W1 + b1) W2 + b2`.
    pub struct MlpParams {
        pub w1,
        pub b1,
        pub w2,
        pub b2,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionParams<T = Tensor> {
    pub first: MlpParams<T>,
    pub second: MlpParams<T>,
    /// Hidden width `d_h`, one output logit.
    pub ratio: MlpParams<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HybridParams<T = Tensor> {
    pub emotion: ExpertParams<T>,
    pub general: ExpertParams<T>,
    pub gate: GateParams<T>,
}

/// One of the three interchangeable projector variants.
#[derive(Clone, Debug, PartialEq)]
pub enum Projector<T = Tensor> {
    Mlp(MlpParams<T>),
    Fusion(FusionParams<T>),
    Hybrid(HybridParams<T>),
}

fn init_weight<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    Tensor::uniform(&[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt(), rng)
}

impl MlpParams {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, d_in: usize, d_h: usize, d_out: usize) -> Self {
        MlpParams {
            w1: init_weight(rng, d_in, d_h),
            b1: Tensor::zeros(&[d_h]),
            w2: init_weight(rng, d_h, d_out),
            b2: Tensor::zeros(&[d_out]),
        }
    }
}

impl ExpertParams {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, dims: &ProjectorDims) -> Self {
        ExpertParams {
            w_in: init_weight(rng, dims.d_in(), dims.d_h),
            b_in: Tensor::zeros(&[dims.d_h]),
            w_out: init_weight(rng, dims.d_h, dims.d_t),
            b_out: Tensor::zeros(&[dims.d_t]),
            gamma: Tensor::ones(&[dims.d_t]),
            beta: Tensor::zeros(&[dims.d_t]),
        }
    }
}

impl GateParams {
    /// `b_gate` starts at zero so both experts begin with weight 0.5.
    pub fn init<R: Rng + ?Sized>(rng: &mut R, d_in: usize) -> Self {
        GateParams {
            wq: init_weight(rng, d_in, d_in),
            wk: init_weight(rng, d_in, d_in),
            wv: init_weight(rng, d_in, d_in),
            w_gate: init_weight(rng, d_in, 2),
            b_gate: Tensor::zeros(&[2]),
        }
    }
}

impl Projector {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, kind: ProjectorKind, dims: &ProjectorDims) -> Self {
        let d_in = dims.d_in();
        match kind {
            ProjectorKind::Mlp => Projector::Mlp(MlpParams::init(rng, d_in, dims.d_h, dims.d_t)),
            ProjectorKind::Fusion => Projector::Fusion(FusionParams {
                first: MlpParams::init(rng, d_in, dims.d_h, dims.d_t),
                second: MlpParams::init(rng, d_in, dims.d_h, dims.d_t),
                ratio: MlpParams::init(rng, d_in, dims.d_h, 1),
            }),
            ProjectorKind::HybridCompressor => Projector::Hybrid(HybridParams {
                emotion: ExpertParams::init(rng, dims),
                general: ExpertParams::init(rng, dims),
                gate: GateParams::init(rng, d_in),
            }),
        }
    }
}

impl<T> Projector<T> {
    pub fn kind(&self) -> ProjectorKind {
        match self {
            Projector::Mlp(_) => ProjectorKind::Mlp,
            Projector::Fusion(_) => ProjectorKind::Fusion,
            Projector::Hybrid(_) => ProjectorKind::HybridCompressor,
        }
    }
}

impl ParamSet for FusionParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.first.visit(&join(prefix, "first"), f);
        self.second.visit(&join(prefix, "second"), f);
        self.ratio.visit(&join(prefix, "ratio"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.first.visit_mut(&join(prefix, "first"), f);
        self.second.visit_mut(&join(prefix, "second"), f);
        self.ratio.visit_mut(&join(prefix, "ratio"), f);
    }
}

impl Bind for FusionParams {
    type Bound = FusionParams<Var>;

    fn bind(&self, prefix: &str, tape: &mut Tape, binding: &mut Binding) -> Self::Bound {
        FusionParams {
            first: self.first.bind(&join(prefix, "first"), tape, binding),
            second: self.second.bind(&join(prefix, "second"), tape, binding),
            ratio: self.ratio.bind(&join(prefix, "ratio"), tape, binding),
        }
    }
}

impl ParamSet for HybridParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.emotion.visit(&join(prefix, "emotion"), f);
        self.general.visit(&join(prefix, "general"), f);
        self.gate.visit(&join(prefix, "gate"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.emotion.visit_mut(&join(prefix, "emotion"), f);
        self.general.visit_mut(&join(prefix, "general"), f);
        self.gate.visit_mut(&join(prefix, "gate"), f);
    }
}

impl Bind for HybridParams {
    type Bound = HybridParams<Var>;

    fn bind(&self, prefix: &str, tape: &mut Tape, binding: &mut Binding) -> Self::Bound {
        HybridParams {
            emotion: self.emotion.bind(&join(prefix, "emotion"), tape, binding),
            general: self.general.bind(&join(prefix, "general"), tape, binding),
            gate: self.gate.bind(&join(prefix, "gate"), tape, binding),
        }
    }
}

impl ParamSet for Projector {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        match self {
            Projector::Mlp(p) => p.visit(&join(prefix, "mlp"), f),
            Projector::Fusion(p) => p.visit(&join(prefix, "fusion"), f),
            Projector::Hybrid(p) => p.visit(&join(prefix, "hybrid"), f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        match self {
            Projector::Mlp(p) => p.visit_mut(&join(prefix, "mlp"), f),
            Projector::Fusion(p) => p.visit_mut(&join(prefix, "fusion"), f),
            Projector::Hybrid(p) => p.visit_mut(&join(prefix, "hybrid"), f),
        }
    }
}

impl Bind for Projector {
    type Bound = Projector<Var>;

    fn bind(&self, prefix: &str, tape: &mut Tape, binding: &mut Binding) -> Self::Bound {
        match self {
            Projector::Mlp(p) => Projector::Mlp(p.bind(&join(prefix, "mlp"), tape, binding)),
            Projector::Fusion(p) => {
                Projector::Fusion(p.bind(&join(prefix, "fusion"), tape, binding))
            }
            Projector::Hybrid(p) => {
                Projector::Hybrid(p.bind(&join(prefix, "hybrid"), tape, binding))
            }
        }
    }
}

/// Concatenates each run of `k` consecutive rows of an `[N1 x d_v]` matrix
/// into one `[1 x k*d_v]` row. A ragged tail is padded by repeating the last
/// row.
pub fn token_merge(values: &Tensor, k: usize) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(values.clone());
    let out = merge_tokens(&mut tape, x, k)?;
    Ok(tape.value(out).clone())
}

/// Tape version of [`token_merge`].
pub fn merge_tokens(tape: &mut Tape, x: Var, k: usize) -> Result<Var> {
    if k == 0 {
        return Err(Error::config("merge factor k must be positive"));
    }
    let (n, d) = tape.value(x).dims2()?;
    let groups = n.div_ceil(k);
    let padded = if groups * k == n {
        x
    } else {
        let ids: Vec<usize> = (0..groups * k).map(|i| i.min(n - 1)).collect();
        tape.gather_rows(x, &ids)?
    };
    tape.reshape(padded, &[groups, k * d])
}

/// Applies `act(x W1 + b1) W2 + b2` with the given hidden activation.
fn mlp_forward(
    tape: &mut Tape,
    x: Var,
    p: &MlpParams<Var>,
    act: fn(&mut Tape, Var) -> Var,
) -> Result<Var> {
    let h = tape.matmul(x, p.w1)?;
    let h = tape.add_bias(h, p.b1)?;
    let h = act(tape, h);
    let o = tape.matmul(h, p.w2)?;
    tape.add_bias(o, p.b2)
}

/// One expert over merged tokens `x` `[n x d_in]`, giving `[n x d_t]`.
pub fn expert_forward(tape: &mut Tape, x: Var, p: &ExpertParams<Var>) -> Result<Var> {
    let h = tape.matmul(x, p.w_in)?;
    let h = tape.add_bias(h, p.b_in)?;
    let h = tape.gelu(h);
    let o = tape.matmul(h, p.w_out)?;
    let o = tape.add_bias(o, p.b_out)?;
    tape.layer_norm(o, p.gamma, p.beta, LN_EPS)
}

/// Row-softmax over the two gate logits, `[n x 2]`; column 0 is the emotion
/// expert's weight, column 1 the general expert's.
pub fn gate_probs(tape: &mut Tape, x: Var, g: &GateParams<Var>) -> Result<Var> {
    let a = tape.self_attention(x, g.wq, g.wk, g.wv)?;
    let logits = tape.matmul(a, g.w_gate)?;
    if tape.value(logits).dims2()?.1 != 2 {
        return Err(Error::dim(
            "gate",
            format!("w_gate {:?} must have 2 columns", tape.value(g.w_gate).shape()),
        ));
    }
    let logits = tape.add_bias(logits, g.b_gate)?;
    tape.softmax(logits, 1)
}

/// Emotion-expert weight `G` per token, `[n x 1]`, each in `(0, 1)`.
pub fn gate_forward(tape: &mut Tape, x: Var, g: &GateParams<Var>) -> Result<Var> {
    let probs = gate_probs(tape, x, g)?;
    tape.column(probs, 0)
}

/// `G * V_emo + (1 - G) * V_gen` over merged tokens `x`.
pub fn hybrid_forward(tape: &mut Tape, x: Var, p: &HybridParams<Var>) -> Result<VisualTokens<Var>> {
    let v_emo = expert_forward(tape, x, &p.emotion)?;
    let v_gen = expert_forward(tape, x, &p.general)?;
    let g = gate_forward(tape, x, &p.gate)?;
    let neg = tape.scale(g, -1.0);
    let one_minus_g = tape.add_scalar(neg, 1.0);
    let emo = tape.mul_col(v_emo, g)?;
    let gen = tape.mul_col(v_gen, one_minus_g)?;
    let values = tape.add(emo, gen)?;
    Ok(VisualTokens {
        values,
        gate_trace: g,
    })
}

/// Merges `k` embeddings per token and runs the hybrid compressor.
pub fn hybrid_compress(
    tape: &mut Tape,
    embeddings: Var,
    p: &HybridParams<Var>,
    k: usize,
) -> Result<VisualTokens<Var>> {
    let x = merge_tokens(tape, embeddings, k)?;
    hybrid_forward(tape, x, p)
}

fn sentinel_gate(tape: &mut Tape, values: Var) -> Result<Var> {
    let (n, _) = tape.value(values).dims2()?;
    Ok(tape.constant(Tensor::full(&[n, 1], NO_GATE)))
}

fn relu(tape: &mut Tape, x: Var) -> Var {
    tape.relu(x)
}

fn gelu(tape: &mut Tape, x: Var) -> Var {
    tape.gelu(x)
}

/// Linear, ReLU, linear over merged tokens. No gate.
pub fn mlp_projector_forward(
    tape: &mut Tape,
    embeddings: Var,
    p: &MlpParams<Var>,
    k: usize,
) -> Result<VisualTokens<Var>> {
    let x = merge_tokens(tape, embeddings, k)?;
    let values = mlp_forward(tape, x, p, relu)?;
    let gate_trace = sentinel_gate(tape, values)?;
    Ok(VisualTokens { values, gate_trace })
}

/// Two parallel MLP projectors mixed by `r = logistic(ratio(x))`; the ratio
/// head uses a GELU hidden layer.
pub fn fusion_projector_forward(
    tape: &mut Tape,
    embeddings: Var,
    p: &FusionParams<Var>,
    k: usize,
) -> Result<VisualTokens<Var>> {
    let x = merge_tokens(tape, embeddings, k)?;
    let a = mlp_forward(tape, x, &p.first, relu)?;
    let b = mlp_forward(tape, x, &p.second, relu)?;
    let logit = mlp_forward(tape, x, &p.ratio, gelu)?;
    if tape.value(logit).dims2()?.1 != 1 {
        return Err(Error::dim(
            "fusion_projector",
            "ratio head must produce one logit per token",
        ));
    }
    let r = tape.sigmoid(logit);
    let neg = tape.scale(r, -1.0);
    let one_minus_r = tape.add_scalar(neg, 1.0);
    let a = tape.mul_col(a, r)?;
    let b = tape.mul_col(b, one_minus_r)?;
    let values = tape.add(a, b)?;
    Ok(VisualTokens {
        values,
        gate_trace: r,
    })
}

/// Dispatches to the variant's forward pass.
pub fn project(
    tape: &mut Tape,
    embeddings: Var,
    projector: &Projector<Var>,
    k: usize,
) -> Result<VisualTokens<Var>> {
    match projector {
        Projector::Mlp(p) => mlp_projector_forward(tape, embeddings, p, k),
        Projector::Fusion(p) => fusion_projector_forward(tape, embeddings, p, k),
        Projector::Hybrid(p) => hybrid_compress(tape, embeddings, p, k),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dims() -> ProjectorDims {
        ProjectorDims {
            d_v: 3,
            k: 2,
            d_h: 5,
            d_t: 4,
        }
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn merge_shapes_and_rows() {
        let e = Tensor::new(&[8, 4], (0..32).map(f64::from).collect()).unwrap();
        let m = token_merge(&e, 4).unwrap();
        assert_eq!(m.shape(), &[2, 16]);
        let expected: Vec<f64> = (0..16).map(f64::from).collect();
        assert_eq!(m.row(0), &expected[..]);
        assert_eq!(token_merge(&e, 1).unwrap(), e);
        assert!(matches!(token_merge(&e, 0), Err(Error::Config { .. })));
    }

    #[test]
    fn merge_pads_by_repeating_last_token() {
        let e = Tensor::new(&[8, 1], (0..8).map(f64::from).collect()).unwrap();
        let m = token_merge(&e, 3).unwrap();
        assert_eq!(m.shape(), &[3, 3]);
        assert_eq!(m.row(2), &[6.0, 7.0, 7.0]);
    }

    #[test]
    fn expert_zero_and_scale_zero_cases() {
        let d = dims();
        let mut p = ExpertParams::init(&mut rng(1), &d);
        let mut tape = Tape::new();
        let bound = p.bind("", &mut tape, &mut Binding::frozen());
        let x = tape.constant(Tensor::zeros(&[3, d.d_in()]));
        let out = expert_forward(&mut tape, x, &bound).unwrap();
        assert_eq!(tape.value(out).max_abs(), 0.0);

        p.gamma = Tensor::zeros(&[d.d_t]);
        p.beta = Tensor::full(&[d.d_t], 2.5);
        let bound = p.bind("", &mut tape, &mut Binding::frozen());
        let x = tape.constant(Tensor::uniform(&[3, d.d_in()], 4.0, &mut rng(9)));
        let out = expert_forward(&mut tape, x, &bound).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn gate_symmetric_and_saturated() {
        let d = dims();
        let mut g = GateParams::init(&mut rng(2), d.d_in());
        g.w_gate = Tensor::zeros(&[d.d_in(), 2]);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::uniform(&[4, d.d_in()], 1.0, &mut rng(3)));
        let bound = g.bind("", &mut tape, &mut Binding::frozen());
        let gate = gate_forward(&mut tape, x, &bound).unwrap();
        assert!(tape.value(gate).data().iter().all(|&v| v == 0.5));

        g.b_gate = Tensor::vector(vec![30.0, 0.0]);
        let bound = g.bind("", &mut tape, &mut Binding::frozen());
        let gate = gate_forward(&mut tape, x, &bound).unwrap();
        assert!(tape.value(gate).data().iter().all(|&v| v > 1.0 - 1e-9 && v < 1.0));
    }

    #[test]
    fn hybrid_endpoints() {
        let d = dims();
        let mut p = HybridParams {
            emotion: ExpertParams::init(&mut rng(4), &d),
            general: ExpertParams::init(&mut rng(5), &d),
            gate: GateParams::init(&mut rng(6), d.d_in()),
        };
        let e = Tensor::uniform(&[6, d.d_v], 1.0, &mut rng(7));

        // midpoint
        p.gate.w_gate = Tensor::zeros(&[d.d_in(), 2]);
        let mut tape = Tape::new();
        let bound = p.bind("", &mut tape, &mut Binding::frozen());
        let ev = tape.constant(e.clone());
        let out = hybrid_compress(&mut tape, ev, &bound, d.k).unwrap();
        let x = merge_tokens(&mut tape, ev, d.k).unwrap();
        let emo = expert_forward(&mut tape, x, &bound.emotion).unwrap();
        let gen = expert_forward(&mut tape, x, &bound.general).unwrap();
        let mean = tape
            .value(emo)
            .zip_map(tape.value(gen), |a, b| 0.5 * a + 0.5 * b)
            .unwrap();
        assert_eq!(tape.value(out.values), &mean);

        // saturated to the emotion expert: G rounds to exactly 1
        p.gate.b_gate = Tensor::vector(vec![40.0, 0.0]);
        let bound = p.bind("", &mut tape, &mut Binding::frozen());
        let out = hybrid_compress(&mut tape, ev, &bound, d.k).unwrap();
        assert!(tape.value(out.gate_trace).data().iter().all(|&v| v == 1.0));
        let emo = expert_forward(&mut tape, x, &bound.emotion).unwrap();
        assert_eq!(tape.value(out.values), tape.value(emo));
    }

    #[test]
    fn mlp_projector_bias_only_cases() {
        let d = dims();
        let mut p = MlpParams::init(&mut rng(8), d.d_in(), d.d_h, d.d_t);
        p.w1 = Tensor::zeros(p.w1.shape());
        p.w2 = Tensor::zeros(p.w2.shape());
        p.b2 = Tensor::vector(vec![1.0, -2.0, 3.0, 0.5]);
        let mut tape = Tape::new();
        let e = tape.constant(Tensor::uniform(&[4, d.d_v], 1.0, &mut rng(10)));
        let bound = p.bind("", &mut tape, &mut Binding::frozen());
        let out = mlp_projector_forward(&mut tape, e, &bound, d.k).unwrap();
        for i in 0..2 {
            assert_eq!(tape.value(out.values).row(i), &[1.0, -2.0, 3.0, 0.5]);
        }
        assert!(tape.value(out.gate_trace).data().iter().all(|&v| v == NO_GATE));

        // all pre-activations negative: ReLU passes nothing
        let mut p = MlpParams::init(&mut rng(11), d.d_in(), d.d_h, d.d_t);
        p.w1 = Tensor::zeros(p.w1.shape());
        p.b1 = Tensor::full(&[d.d_h], -1.0);
        p.b2 = Tensor::vector(vec![0.25; 4]);
        let bound = p.bind("", &mut tape, &mut Binding::frozen());
        let out = mlp_projector_forward(&mut tape, e, &bound, d.k).unwrap();
        assert!(tape.value(out.values).data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn fusion_ratio_half_and_tied_branches() {
        let d = dims();
        let Projector::Fusion(mut p) =
            Projector::init(&mut rng(12), ProjectorKind::Fusion, &d)
        else {
            unreachable!()
        };
        p.ratio.w2 = Tensor::zeros(p.ratio.w2.shape());
        let mut tape = Tape::new();
        let e = tape.constant(Tensor::uniform(&[4, d.d_v], 1.0, &mut rng(13)));
        let bound = p.bind("", &mut tape, &mut Binding::frozen());
        let out = fusion_projector_forward(&mut tape, e, &bound, d.k).unwrap();
        assert!(tape.value(out.gate_trace).data().iter().all(|&v| v == 0.5));

        let mut tied = p.clone();
        tied.second = tied.first.clone();
        tied.ratio = MlpParams::init(&mut rng(14), d.d_in(), d.d_h, 1);
        let bound = tied.bind("", &mut tape, &mut Binding::frozen());
        let out = fusion_projector_forward(&mut tape, e, &bound, d.k).unwrap();
        let x = merge_tokens(&mut tape, e, d.k).unwrap();
        let single = mlp_forward(&mut tape, x, &bound.first, relu).unwrap();
        let diff = tape
            .value(out.values)
            .zip_map(tape.value(single), |a, b| (a - b).abs())
            .unwrap();
        assert!(diff.max_abs() < 1e-15);
    }

    #[test]
    fn param_counts() {
        let tiny = ProjectorDims {
            d_v: 2,
            k: 1,
            d_h: 2,
            d_t: 2,
        };
        assert_eq!(tiny.param_count(ProjectorKind::Mlp), 12);
        let d = dims();
        for kind in [
            ProjectorKind::Mlp,
            ProjectorKind::Fusion,
            ProjectorKind::HybridCompressor,
        ] {
            let p = Projector::init(&mut rng(15), kind, &d);
            assert_eq!(p.param_count(), d.param_count(kind), "{kind:?}");
        }
        assert_eq!(d.fusion_core_count(), 2 * d.param_count(ProjectorKind::Mlp));
    }

    #[test]
    fn variants_share_shapes() {
        let d = dims();
        let e = Tensor::uniform(&[7, d.d_v], 1.0, &mut rng(16));
        for kind in [
            ProjectorKind::Mlp,
            ProjectorKind::Fusion,
            ProjectorKind::HybridCompressor,
        ] {
            let p = Projector::init(&mut rng(17), kind, &d);
            let mut tape = Tape::new();
            let bound = p.bind("", &mut tape, &mut Binding::frozen());
            let ev = tape.constant(e.clone());
            let out = project(&mut tape, ev, &bound, d.k).unwrap().resolve(&tape);
            assert_eq!(out.values.shape(), &[4, d.d_t]);
            assert_eq!(out.gate_trace.shape(), &[4]);
        }
    }
}
