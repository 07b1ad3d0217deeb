//! Central finite-difference oracle for autograd gradients.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::{Tape, Var};
use crate::compressor::{
    expert_forward, gate_forward, project, ExpertParams, GateParams, Projector, ProjectorDims, ProjectorKind,
};
use crate::error::{Error, Result};
use crate::lora::{lora_forward, AdapterRegistry, LinearParams, LoraAdapter, LoraConfig};
use crate::params::{Bind, Binding, ParamSet};
use crate::pipeline::model::{decoder_forward, ModelConfig, ToyModel};
use crate::tensor::Tensor;

/// Floor of the relative-error denominator.
pub const REL_FLOOR: f64 = 1e-8;

/// Per-parameter maximum relative disagreement between autograd and
/// central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub eps: f64,
    pub per_param: BTreeMap<String, f64>,
    /// `(autograd, numeric)` at the worst coordinate of each parameter.
    pub worst_pair: BTreeMap<String, (f64, f64)>,
}

impl GradReport {
    pub fn max_error(&self) -> f64 {
        self.per_param.values().cloned().fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<(&str, f64)> {
        self.per_param
            .iter()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(k, v)| (k.as_str(), *v))
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_error() < tol
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Compares the autograd gradient of `loss` with central differences
/// `(f(x + eps) - f(x - eps)) / (2 eps)` for every coordinate of every
/// parameter in `params`.
///
/// `params` is restored bit-exactly before returning.
pub fn finite_diff_check<P, F>(params: &mut P, eps: f64, loss: F) -> Result<GradReport>
where
    P: ParamSet + Bind,
    F: Fn(&mut Tape, &P::Bound) -> Result<Var>,
{
    if !(1e-8..=1e-4).contains(&eps) {
        return Err(Error::Contract(format!(
            "finite-difference eps {eps} outside [1e-8, 1e-4]"
        )));
    }

    let analytic = {
        let mut tape = Tape::new();
        let mut binding = Binding::all();
        let bound = params.bind("", &mut tape, &mut binding);
        let out = loss(&mut tape, &bound)?;
        check_finite(tape.value(out).item()?)?;
        let grads = tape.backward(out)?;
        binding.gradients(&grads)
    };

    let eval = |params: &P| -> Result<f64> {
        let mut tape = Tape::new();
        let mut binding = Binding::frozen();
        let bound = params.bind("", &mut tape, &mut binding);
        let out = loss(&mut tape, &bound)?;
        check_finite(tape.value(out).item()?)
    };

    let sizes: Vec<(String, usize)> = {
        let mut v = Vec::new();
        params.visit("", &mut |name, t| v.push((name, t.len())));
        v
    };

    let mut per_param = BTreeMap::new();
    let mut worst_pair = BTreeMap::new();
    for (name, len) in sizes {
        let grad = analytic
            .get(&name)
            .ok_or_else(|| Error::Lookup(format!("no gradient for `{name}`")))?;
        let mut worst: f64 = 0.0;
        let mut pair = (0.0, 0.0);
        for i in 0..len {
            let original = coordinate(params, &name, i, None);
            let hi = coordinate(params, &name, i, Some(original + eps));
            let plus = eval(params);
            let lo = coordinate(params, &name, i, Some(original - eps));
            let minus = eval(params);
            coordinate(params, &name, i, Some(original));
            // divide by the step actually taken after rounding
            let numeric = (plus? - minus?) / (hi - lo);
            let err = relative_error(grad.data()[i], numeric);
            if err >= worst {
                worst = err;
                pair = (grad.data()[i], numeric);
            }
        }
        worst_pair.insert(name.clone(), pair);
        per_param.insert(name, worst);
    }
    Ok(GradReport {
        eps,
        per_param,
        worst_pair,
    })
}

/// Reads coordinate `i` of tensor `name`, optionally overwriting it first.
fn coordinate<P: ParamSet>(params: &mut P, name: &str, i: usize, set: Option<f64>) -> f64 {
    let mut value = f64::NAN;
    params.visit_mut("", &mut |n, t| {
        if n == name {
            if let Some(v) = set {
                t.data_mut()[i] = v;
            }
            value = t.data()[i];
        }
    });
    value
}

fn check_finite(v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric(format!("objective evaluated to {v}")))
    }
}

/// Result of checking one block on one random instance.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BlockCheck {
    pub block: &'static str,
    pub seed: u64,
    pub max_error: f64,
    pub worst: String,
    /// `(autograd, numeric)` at the worst coordinate.
    pub pair: (f64, f64),
}

/// Step used by `grad-check`. Large enough that roundoff in the objective
/// stays below the tolerance for gradients down to about 1e-7, small enough
/// that truncation error through GELU and layer norm does too.
pub const SUITE_EPS: f64 = 1e-5;

/// Blocks covered by [`block_suite`].
pub const BLOCKS: [&str; 8] = [
    "emotion_expert",
    "gate",
    "hybrid_projector",
    "mlp_projector",
    "fusion_projector",
    "decoder",
    "lora",
    "lora_dropout",
];

/// Random small shapes for one suite instance.
fn suite_dims(rng: &mut ChaCha8Rng) -> (ProjectorDims, usize) {
    let dims = ProjectorDims {
        d_v: rng.gen_range(2..=4),
        k: rng.gen_range(1..=3),
        d_h: rng.gen_range(2..=5),
        d_t: rng.gen_range(3..=5),
    };
    let n1 = rng.gen_range(2..=7);
    (dims, n1)
}

/// Weighted sum `sum(x * w)` with fixed random weights, so that every output
/// coordinate contributes to the objective.
fn probe(tape: &mut Tape, x: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    let w = Tensor::uniform(&shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
    let w = tape.constant(w);
    let prod = tape.mul(x, w)?;
    Ok(tape.sum(prod))
}

fn report(block: &'static str, seed: u64, r: GradReport) -> BlockCheck {
    let (worst, max_error) = r.worst().map(|(n, e)| (n.to_string(), e)).unwrap_or_default();
    let pair = r.worst_pair.get(&worst).copied().unwrap_or_default();
    BlockCheck {
        block,
        seed,
        max_error,
        worst,
        pair,
    }
}

/// Base linear map plus one active adapter set, checked together.
struct LoraCase {
    base: LinearParams,
    adapters: AdapterRegistry,
}

impl ParamSet for LoraCase {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.base.visit(&crate::params::join(prefix, "base"), f);
        self.adapters.visit(prefix, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.base.visit_mut(&crate::params::join(prefix, "base"), f);
        self.adapters.visit_mut(prefix, f);
    }
}

impl Bind for LoraCase {
    type Bound = (LinearParams<Var>, BTreeMap<String, LoraAdapter<Var>>);

    fn bind(&self, prefix: &str, tape: &mut Tape, binding: &mut Binding) -> Self::Bound {
        (
            self.base.bind(&crate::params::join(prefix, "base"), tape, binding),
            self.adapters.bind_active(tape, binding),
        )
    }
}

/// Gradient-checks every differentiable block on a random instance derived
/// from `seed`.
pub fn block_suite(seed: u64, eps: f64) -> Result<Vec<BlockCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (dims, n1) = suite_dims(&mut rng);
    let x = Tensor::uniform(&[n1, dims.d_v], 1.5, &mut rng);
    let merged = crate::compressor::token_merge(&x, dims.k)?;
    let probe_seed = seed ^ 0x9e37_79b9;
    let mut out = Vec::new();

    let mut expert = ExpertParams::init(&mut rng, &dims);
    expert.b_in = Tensor::uniform(&[dims.d_h], 0.5, &mut rng);
    expert.gamma = Tensor::uniform(&[dims.d_t], 1.0, &mut rng).map(|v| v + 1.5);
    let r = finite_diff_check(&mut expert, eps, |tape, p| {
        let m = tape.constant(merged.clone());
        let y = expert_forward(tape, m, p)?;
        probe(tape, y, probe_seed)
    })?;
    out.push(report("emotion_expert", seed, r));

    let mut gate = GateParams::init(&mut rng, dims.d_in());
    gate.b_gate = Tensor::uniform(&[2], 0.5, &mut rng);
    let r = finite_diff_check(&mut gate, eps, |tape, p| {
        let m = tape.constant(merged.clone());
        let g = gate_forward(tape, m, p)?;
        probe(tape, g, probe_seed)
    })?;
    out.push(report("gate", seed, r));

    for (kind, name) in [
        (ProjectorKind::HybridCompressor, "hybrid_projector"),
        (ProjectorKind::Mlp, "mlp_projector"),
        (ProjectorKind::Fusion, "fusion_projector"),
    ] {
        let mut p = Projector::init(&mut rng, kind, &dims);
        // move biases off zero so that no pre-activation sits on a ReLU kink
        p.visit_mut("", &mut |n, t| {
            if n.ends_with(".b1") {
                *t = t.map(|_| 0.05);
            }
        });
        let r = finite_diff_check(&mut p, eps, |tape, p| {
            let e = tape.constant(x.clone());
            let v = project(tape, e, p, dims.k)?;
            probe(tape, v.values, probe_seed)
        })?;
        out.push(report(name, seed, r));
    }

    let cfg = ModelConfig {
        d_v: dims.d_v,
        d_t: dims.d_t,
        d_h: dims.d_h,
        n1,
        k: dims.k,
        text_len: 2,
        vocab: 4,
        classes: 2,
        decoder_blocks: 2,
        mlp_ratio: 2,
        projector: ProjectorKind::HybridCompressor,
    };
    let mut model = ToyModel::new(cfg, rng.gen())?;
    let text = [rng.gen_range(0..4), rng.gen_range(0..4)];
    let label = rng.gen_range(0..2);
    // the projector output is held fixed: upstream blocks are checked above
    let visual = Tensor::uniform(&[n1.div_ceil(dims.k), dims.d_t], 1.0, &mut rng);
    let no_lora = BTreeMap::new();
    let r = finite_diff_check(&mut model.decoder, eps, |tape, d| {
        let v = tape.constant(visual.clone());
        let logits = decoder_forward(tape, d, &no_lora, v, &text, None)?;
        tape.cross_entropy(logits, &[label])
    })?;
    out.push(report("decoder", seed, r));

    let (d_in, d_out) = (rng.gen_range(2..=5), rng.gen_range(2..=5));
    let lcfg = LoraConfig {
        rank: rng.gen_range(1..=d_in.min(d_out)),
        alpha: 2.0,
        dropout: 0.3,
    };
    let mut case = LoraCase {
        base: LinearParams::init(&mut rng, d_in, d_out),
        adapters: AdapterRegistry::new(),
    };
    case.adapters.add_set("check", &[("base".to_string(), d_in, d_out)], &lcfg, &mut rng)?;
    case.adapters.select("check")?;
    // a fresh B is zero, which would leave A's gradient identically zero
    let b_values = Tensor::uniform(&[d_out, lcfg.rank], 1.0, &mut rng);
    case.visit_mut("", &mut |n, t| {
        if n.ends_with("/B") {
            *t = b_values.clone();
        }
    });
    let lx = Tensor::uniform(&[3, d_in], 1.0, &mut rng);
    for (name, dropout) in [("lora", false), ("lora_dropout", true)] {
        let r = finite_diff_check(&mut case, eps, |tape, (base, lora)| {
            let input = tape.constant(lx.clone());
            let mut mask_rng = ChaCha8Rng::seed_from_u64(probe_seed);
            let rng: Option<&mut dyn rand::RngCore> = if dropout { Some(&mut mask_rng) } else { None };
            let y = lora_forward(tape, input, base, &lora["base"], rng)?;
            probe(tape, y, probe_seed)
        })?;
        out.push(report(name, seed, r));
    }
    Ok(out)
}
