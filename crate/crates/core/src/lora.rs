//! Named low-rank adapters over linear maps.
//!
//! An adapter adds `(alpha / r) * B A` to a frozen map, where `A` is
//! `[r x d_in]` and `B` is `[d_out x r]`. In the row-vector convention used
//! throughout the crate (`y = x W + b`, `W` is `[d_in x d_out]`) that is
//! `y += (alpha / r) * x A^T B^T`.

use std::collections::BTreeMap;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{join, Bind, Binding, ParamSet};
use crate::tensor::Tensor;

/// Affine map `x W + b` with `W` `[d_in x d_out]`. The bias is optional.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearParams<T = Tensor> {
    pub weight: T,
    pub bias: Option<T>,
}

impl LinearParams {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, d_in: usize, d_out: usize) -> Self {
        LinearParams {
            weight: Tensor::uniform(&[d_in, d_out], 1.0 / (d_in as f64).sqrt(), rng),
            bias: Some(Tensor::zeros(&[d_out])),
        }
    }

    /// `x W` with no bias term.
    pub fn init_unbiased<R: Rng + ?Sized>(rng: &mut R, d_in: usize, d_out: usize) -> Self {
        LinearParams {
            bias: None,
            ..Self::init(rng, d_in, d_out)
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        self.weight.dims2().expect("linear weight is a matrix")
    }
}

impl ParamSet for LinearParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(join(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(join(prefix, "bias"), b);
        }
    }
}

impl Bind for LinearParams {
    type Bound = LinearParams<Var>;

    fn bind(&self, prefix: &str, tape: &mut Tape, binding: &mut Binding) -> Self::Bound {
        LinearParams {
            weight: binding.bind(tape, &join(prefix, "weight"), &self.weight),
            bias: self.bias.as_ref().map(|b| binding.bind(tape, &join(prefix, "bias"), b)),
        }
    }
}

pub fn linear(tape: &mut Tape, x: Var, p: &LinearParams<Var>) -> Result<Var> {
    let y = tape.matmul(x, p.weight)?;
    match p.bias {
        Some(b) => tape.add_bias(y, b),
        None => Ok(y),
    }
}

/// Rank, scaling and dropout shared by the adapters of one set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
}

impl Default for LoraConfig {
    /// Keeps `alpha / r = 1`.
    fn default() -> Self {
        LoraConfig {
            rank: 4,
            alpha: 4.0,
            dropout: 0.05,
        }
    }
}

impl LoraConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::config("lora rank must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!(
                "lora dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// Low-rank delta attached to the linear map named `target`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter<T = Tensor> {
    pub target: String,
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    /// `[r x d_in]`
    pub a: T,
    /// `[d_out x r]`
    pub b: T,
}

impl<T> LoraAdapter<T> {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

impl LoraAdapter {
    /// `A ~ U(+-1/sqrt(d_in))`, `B = 0`: a fresh adapter is an exact no-op.
    pub fn new<R: Rng + ?Sized>(
        rng: &mut R,
        target: &str,
        d_in: usize,
        d_out: usize,
        cfg: &LoraConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if cfg.rank > d_in.min(d_out) {
            return Err(Error::config(format!(
                "lora rank {} exceeds min({d_in}, {d_out}) for `{target}`",
                cfg.rank
            )));
        }
        Ok(LoraAdapter {
            target: target.to_string(),
            rank: cfg.rank,
            alpha: cfg.alpha,
            dropout: cfg.dropout,
            a: Tensor::uniform(&[cfg.rank, d_in], 1.0 / (d_in as f64).sqrt(), rng),
            b: Tensor::zeros(&[d_out, cfg.rank]),
        })
    }

    /// `(alpha / r) * (B A)^T`, shaped like the base weight.
    pub fn delta_weight(&self) -> Result<Tensor> {
        let s = self.scaling();
        Ok(self.b.matmul(&self.a)?.transpose()?.map(|v| s * v))
    }

    fn bind_named(&self, set: &str, tape: &mut Tape, binding: &mut Binding) -> LoraAdapter<Var> {
        LoraAdapter {
            target: self.target.clone(),
            rank: self.rank,
            alpha: self.alpha,
            dropout: self.dropout,
            a: binding.bind(tape, &adapter_tensor_name(set, &self.target, "A"), &self.a),
            b: binding.bind(tape, &adapter_tensor_name(set, &self.target, "B"), &self.b),
        }
    }
}

/// Canonical name `lora/<set>/<target>/<A|B>`.
pub fn adapter_tensor_name(set: &str, target: &str, which: &str) -> String {
    format!("lora/{set}/{target}/{which}")
}

/// `base(x) + (alpha / r) * B (A drop(x))`.
///
/// With `dropout_rng` present and `p > 0` each input entry of the adapter path
/// is zeroed with probability `p` and survivors are scaled by `1 / (1 - p)`.
/// The base path never sees dropout.
pub fn lora_forward(
    tape: &mut Tape,
    x: Var,
    base: &LinearParams<Var>,
    adapter: &LoraAdapter<Var>,
    dropout_rng: Option<&mut dyn RngCore>,
) -> Result<Var> {
    let y = linear(tape, x, base)?;
    let (d_in, d_out) = tape.value(base.weight).dims2()?;
    if tape.value(adapter.a).shape() != [adapter.rank, d_in]
        || tape.value(adapter.b).shape() != [d_out, adapter.rank]
    {
        return Err(Error::dim(
            "lora_forward",
            format!(
                "adapter A {:?}, B {:?} for base {:?}",
                tape.value(adapter.a).shape(),
                tape.value(adapter.b).shape(),
                [d_in, d_out]
            ),
        ));
    }
    let input = match dropout_rng {
        Some(rng) if adapter.dropout > 0.0 => {
            let p = adapter.dropout;
            let keep = 1.0 / (1.0 - p);
            let shape = tape.value(x).shape().to_vec();
            let mut mask = Tensor::zeros(&shape);
            for m in mask.data_mut() {
                *m = if rng.gen::<f64>() < p { 0.0 } else { keep };
            }
            let mask = tape.constant(mask);
            tape.mul(x, mask)?
        }
        _ => x,
    };
    let at = tape.transpose(adapter.a)?;
    let bt = tape.transpose(adapter.b)?;
    let low = tape.matmul(input, at)?;
    let delta = tape.matmul(low, bt)?;
    let delta = tape.scale(delta, adapter.scaling());
    tape.add(y, delta)
}

/// Folds the adapter into the base weight: `W' = W + (alpha / r) (B A)^T`.
pub fn lora_merge(base_name: &str, base: &LinearParams, adapter: &LoraAdapter) -> Result<LinearParams> {
    if adapter.target != base_name {
        return Err(Error::Contract(format!(
            "adapter targets `{}`, not `{base_name}`",
            adapter.target
        )));
    }
    let delta = adapter.delta_weight()?;
    if delta.shape() != base.weight.shape() {
        return Err(Error::dim(
            "lora_merge",
            format!("delta {:?} for weight {:?}", delta.shape(), base.weight.shape()),
        ));
    }
    Ok(LinearParams {
        weight: base.weight.zip_map(&delta, |w, d| w + d)?,
        bias: base.bias.clone(),
    })
}

/// Inverse of [`lora_merge`].
pub fn lora_unmerge(base_name: &str, merged: &LinearParams, adapter: &LoraAdapter) -> Result<LinearParams> {
    if adapter.target != base_name {
        return Err(Error::Contract(format!(
            "adapter targets `{}`, not `{base_name}`",
            adapter.target
        )));
    }
    let delta = adapter.delta_weight()?;
    Ok(LinearParams {
        weight: merged.weight.zip_map(&delta, |w, d| w - d)?,
        bias: merged.bias.clone(),
    })
}

/// Adapter sets keyed by name (one per downstream dataset), at most one
/// active at a time.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdapterRegistry {
    sets: BTreeMap<String, BTreeMap<String, LoraAdapter>>,
    active: Option<String>,
}

impl AdapterRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Creates a fresh adapter set over `targets` (`(name, d_in, d_out)`).
    pub fn add_set<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        targets: &[(String, usize, usize)],
        cfg: &LoraConfig,
        rng: &mut R,
    ) -> Result<()> {
        if name.is_empty() || name.contains('/') {
            return Err(Error::config(format!("invalid adapter set name `{name}`")));
        }
        if self.sets.contains_key(name) {
            return Err(Error::config(format!("adapter set `{name}` already exists")));
        }
        let mut set = BTreeMap::new();
        for (target, d_in, d_out) in targets {
            set.insert(target.clone(), LoraAdapter::new(rng, target, *d_in, *d_out, cfg)?);
        }
        self.sets.insert(name.to_string(), set);
        Ok(())
    }

    pub fn insert_adapter(&mut self, set: &str, adapter: LoraAdapter) {
        self.sets
            .entry(set.to_string())
            .or_default()
            .insert(adapter.target.clone(), adapter);
    }

    pub fn set_names(&self) -> impl Iterator<Item = &str> {
        self.sets.keys().map(String::as_str)
    }

    pub fn set(&self, name: &str) -> Option<&BTreeMap<String, LoraAdapter>> {
        self.sets.get(name)
    }

    pub fn set_mut(&mut self, name: &str) -> Option<&mut BTreeMap<String, LoraAdapter>> {
        self.sets.get_mut(name)
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    /// Makes `name` the only adapter set applied by subsequent forwards.
    pub fn select(&mut self, name: &str) -> Result<()> {
        if !self.sets.contains_key(name) {
            return Err(Error::Lookup(format!("no adapter set named `{name}`")));
        }
        self.active = Some(name.to_string());
        Ok(())
    }

    /// Deactivates all adapters (pure base model).
    pub fn select_none(&mut self) {
        self.active = None;
    }

    pub fn active(&self) -> Option<&str> {
        self.active.as_deref()
    }

    /// Binds the active set, keyed by target.
    pub fn bind_active(&self, tape: &mut Tape, binding: &mut Binding) -> BTreeMap<String, LoraAdapter<Var>> {
        let Some(name) = &self.active else {
            return BTreeMap::new();
        };
        self.sets[name]
            .iter()
            .map(|(target, a)| (target.clone(), a.bind_named(name, tape, binding)))
            .collect()
    }
}

impl ParamSet for AdapterRegistry {
    /// Names are `lora/<set>/<target>/<A|B>`; the prefix is ignored so names
    /// stay canonical wherever the registry is embedded.
    fn visit<'a>(&'a self, _prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        for (set, adapters) in &self.sets {
            for (target, a) in adapters {
                f(adapter_tensor_name(set, target, "A"), &a.a);
                f(adapter_tensor_name(set, target, "B"), &a.b);
            }
        }
    }

    fn visit_mut(&mut self, _prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (set, adapters) in self.sets.iter_mut() {
            for (target, a) in adapters.iter_mut() {
                f(adapter_tensor_name(set, target, "A"), &mut a.a);
                f(adapter_tensor_name(set, target, "B"), &mut a.b);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Bind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn forward(base: &LinearParams, adapter: &LoraAdapter, x: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let mut binding = Binding::frozen();
        let b = base.bind("base", &mut tape, &mut binding);
        let a = adapter.bind_named("s", &mut tape, &mut binding);
        let xv = tape.constant(x.clone());
        let y = lora_forward(&mut tape, xv, &b, &a, None).unwrap();
        tape.value(y).clone()
    }

    fn base_only(base: &LinearParams, x: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let b = base.bind("base", &mut tape, &mut Binding::frozen());
        let xv = tape.constant(x.clone());
        let y = linear(&mut tape, xv, &b).unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn fresh_adapter_is_noop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let base = LinearParams::init(&mut rng, 6, 5);
        let adapter = LoraAdapter::new(&mut rng, "t", 6, 5, &LoraConfig::default()).unwrap();
        let x = Tensor::uniform(&[3, 6], 2.0, &mut rng);
        assert!(forward(&base, &adapter, &x).bit_eq(&base_only(&base, &x)));
        let merged = lora_merge("t", &base, &adapter).unwrap();
        assert!(merged.weight.bit_eq(&base.weight));
    }

    #[test]
    fn zero_alpha_is_noop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let base = LinearParams::init(&mut rng, 4, 4);
        let mut adapter = LoraAdapter::new(&mut rng, "t", 4, 4, &LoraConfig::default()).unwrap();
        adapter.b = Tensor::uniform(&[4, 4], 1.0, &mut rng);
        adapter.alpha = 0.0;
        let x = Tensor::uniform(&[2, 4], 1.0, &mut rng);
        assert!(forward(&base, &adapter, &x).bit_eq(&base_only(&base, &x)));
    }

    #[test]
    fn rank_one_hand_example() {
        let base = LinearParams {
            weight: Tensor::zeros(&[2, 2]),
            bias: Some(Tensor::zeros(&[2])),
        };
        let adapter = LoraAdapter {
            target: "t".into(),
            rank: 1,
            alpha: 1.0,
            dropout: 0.0,
            a: Tensor::from_rows(&[&[1.0, 0.0]]).unwrap(),
            b: Tensor::from_rows(&[&[1.0], &[0.0]]).unwrap(),
        };
        let x = Tensor::from_rows(&[&[3.0, 5.0]]).unwrap();
        assert_eq!(forward(&base, &adapter, &x).data(), &[3.0, 0.0]);
    }

    #[test]
    fn merge_rejects_wrong_target_and_unmerge_recovers() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let base = LinearParams::init(&mut rng, 5, 3);
        let mut adapter = LoraAdapter::new(&mut rng, "t", 5, 3, &LoraConfig {
            rank: 2,
            alpha: 3.0,
            dropout: 0.0,
        })
        .unwrap();
        adapter.b = Tensor::uniform(&[3, 2], 1.0, &mut rng);
        assert!(matches!(lora_merge("other", &base, &adapter), Err(Error::Contract(_))));
        let merged = lora_merge("t", &base, &adapter).unwrap();
        let back = lora_unmerge("t", &merged, &adapter).unwrap();
        let err = back
            .weight
            .zip_map(&base.weight, |a, b| (a - b).abs())
            .unwrap()
            .max_abs();
        assert!(err < 1e-12);
    }

    #[test]
    fn config_validation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let bad_rank = LoraConfig {
            rank: 5,
            ..LoraConfig::default()
        };
        assert!(LoraAdapter::new(&mut rng, "t", 4, 8, &bad_rank).is_err());
        let bad_p = LoraConfig {
            dropout: 1.0,
            ..LoraConfig::default()
        };
        assert!(LoraAdapter::new(&mut rng, "t", 8, 8, &bad_p).is_err());
    }

    #[test]
    fn registry_selection() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut reg = AdapterRegistry::new();
        let targets = vec![("m".to_string(), 4, 4)];
        reg.add_set("dfew", &targets, &LoraConfig::default(), &mut rng).unwrap();
        reg.add_set("ver", &targets, &LoraConfig::default(), &mut rng).unwrap();
        assert!(matches!(reg.select("mer"), Err(Error::Lookup(_))));
        assert!(reg.add_set("ver", &targets, &LoraConfig::default(), &mut rng).is_err());

        let mut tape = Tape::new();
        assert!(reg.bind_active(&mut tape, &mut Binding::all()).is_empty());
        reg.select("dfew").unwrap();
        let mut binding = Binding::all();
        let bound = reg.bind_active(&mut tape, &mut binding);
        assert_eq!(bound.len(), 1);
        let names: Vec<_> = binding.trainable_vars().iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, ["lora/dfew/m/A", "lora/dfew/m/B"]);
        assert_eq!(reg.names().len(), 4);
    }
}
