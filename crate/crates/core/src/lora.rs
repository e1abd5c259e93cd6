//! Low-rank adapters over frozen weight matrices.
//!
//! An adapter on a frozen `W: [d_out, d_in]` holds `A: [d_out, r]` and
//! `B: [d_in, r]` and contributes `ΔW = (alpha / r) · A · Bᵀ`. During training
//! the update is applied to activations as `x·Wᵀ + s·(x·B)·Aᵀ` without ever
//! forming `ΔW`; [`merge`] folds it into `W` for inference.
//!
//! `A` starts at zero and `B` at N(0, 0.02²), so an adapted model is exactly
//! the base model until the first update.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{TransformerModel, Weight};
use crate::numerics::{Element, Tape, Tensor, Var};

pub const DEFAULT_RANK: usize = 16;
pub const DEFAULT_ALPHA: f64 = 16.0;
pub const B_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdapterSpec {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    /// Short names (`w_q`, `w_up`, ..) expand to that matrix in every layer;
    /// dotted names (`layer.2.attn.w_o`) select one matrix.
    pub targets: Vec<String>,
    pub seed: u64,
}

impl Default for AdapterSpec {
    fn default() -> Self {
        Self {
            rank: DEFAULT_RANK,
            alpha: DEFAULT_ALPHA,
            dropout: 0.0,
            targets: vec!["w_q".into(), "w_v".into()],
            seed: 0,
        }
    }
}

impl AdapterSpec {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("adapter rank must be at least 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!(
                "alpha must be positive, got {}",
                self.alpha
            )));
        }
        if self.dropout != 0.0 {
            return Err(Error::Config("adapter dropout is fixed at 0".into()));
        }
        if self.targets.is_empty() {
            return Err(Error::Config("no adapter targets".into()));
        }
        Ok(())
    }

    /// Full names of the matrices this spec adapts on `model`, in model order.
    pub fn resolve_targets<T: Element>(&self, model: &TransformerModel<T>) -> Result<Vec<String>> {
        let linear = model.linear_names();
        let mut chosen = BTreeSet::new();
        let mut unknown = Vec::new();
        for target in &self.targets {
            let hits: Vec<&String> = if target.contains('.') {
                linear.iter().filter(|n| *n == target).collect()
            } else {
                linear
                    .iter()
                    .filter(|n| n.rsplit('.').next() == Some(target.as_str()))
                    .collect()
            };
            if hits.is_empty() {
                unknown.push(target.clone());
            }
            chosen.extend(hits.into_iter().cloned());
        }
        if !unknown.is_empty() {
            return Err(Error::Config(format!(
                "adapter targets do not name a linear weight: {}",
                unknown.join(", ")
            )));
        }
        Ok(linear.into_iter().filter(|n| chosen.contains(n)).collect())
    }
}

/// The `(A, B)` pair attached to one frozen matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter<T> {
    pub target: String,
    /// `[d_out, r]`
    pub a: Tensor<T>,
    /// `[d_in, r]`
    pub b: Tensor<T>,
    pub alpha: f64,
    pub rank: usize,
}

impl<T: Element> LoraAdapter<T> {
    pub fn new(target: impl Into<String>, a: Tensor<T>, b: Tensor<T>, alpha: f64) -> Result<Self> {
        let (_, ra) = a.dims2()?;
        let (_, rb) = b.dims2()?;
        if ra != rb || ra == 0 {
            return Err(Error::Dimension(format!(
                "adapter factors {:?} and {:?} disagree on rank",
                a.shape(),
                b.shape()
            )));
        }
        Ok(Self {
            target: target.into(),
            a,
            b,
            alpha,
            rank: ra,
        })
    }

    pub fn scaling(&self) -> T {
        T::from_f64_lossy(self.alpha / self.rank as f64)
    }

    pub fn d_out(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn d_in(&self) -> usize {
        self.b.shape()[0]
    }

    pub fn num_params(&self) -> usize {
        self.a.len() + self.b.len()
    }

    pub fn a_name(&self) -> String {
        format!("{}.lora_a", self.target)
    }

    pub fn b_name(&self) -> String {
        format!("{}.lora_b", self.target)
    }

    fn check_target(&self, w_shape: &[usize]) -> Result<()> {
        if w_shape != [self.d_out(), self.d_in()] {
            return Err(Error::Dimension(format!(
                "adapter for {} expects a [{}, {}] matrix, got {w_shape:?}",
                self.target,
                self.d_out(),
                self.d_in()
            )));
        }
        Ok(())
    }

    /// Scaled update `(alpha / r) · A · Bᵀ`.
    pub fn delta(&self) -> Result<Tensor<T>> {
        Ok(self.a.matmul_nt(&self.b)?.scale(self.scaling()))
    }

    /// Adds the low-rank path to `y = x·Wᵀ` already on the tape.
    pub(crate) fn apply_on_tape(&self, tape: &mut Tape<T>, x: Var, y: Var, track: bool) -> Result<Var> {
        let (a, b) = if track {
            (
                tape.param(self.a_name(), self.a.clone()),
                tape.param(self.b_name(), self.b.clone()),
            )
        } else {
            (tape.constant(self.a.clone()), tape.constant(self.b.clone()))
        };
        let down = tape.matmul(x, b)?;
        let up = tape.matmul_nt(down, a)?;
        let up = tape.scale(up, self.scaling())?;
        tape.add(y, up)
    }
}

/// `x·Wᵀ + (alpha/r)·(x·B)·Aᵀ` for row-vector activations `x: [n, d_in]`.
pub fn adapter_forward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    adapter: &LoraAdapter<T>,
) -> Result<Tensor<T>> {
    adapter.check_target(w.shape())?;
    let base = x.matmul_nt(w)?;
    let low = x.matmul(&adapter.b)?.matmul_nt(&adapter.a)?;
    base.add(&low.scale(adapter.scaling()))
}

/// `W' = W + (alpha/r)·A·Bᵀ`.
pub fn merge<T: Element>(w: &Tensor<T>, adapter: &LoraAdapter<T>) -> Result<Tensor<T>> {
    adapter.check_target(w.shape())?;
    let merged = w.add(&adapter.delta()?)?;
    merged.ensure_finite("merge")?;
    Ok(merged)
}

/// `W = W' − (alpha/r)·A·Bᵀ`, inverse of [`merge`].
pub fn unmerge<T: Element>(merged: &Tensor<T>, adapter: &LoraAdapter<T>) -> Result<Tensor<T>> {
    adapter.check_target(merged.shape())?;
    merged.sub(&adapter.delta()?)
}

/// Freezes the base, attaches zero-initialized adapters to every target and
/// leaves the classification head trainable.
pub fn inject_adapters<T: Element>(
    mut model: TransformerModel<T>,
    spec: &AdapterSpec,
) -> Result<TransformerModel<T>> {
    spec.validate()?;
    let targets = spec.resolve_targets(&model)?;
    model.freeze_all();
    for name in model.head_names() {
        model.set_trainable(name, true)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = Normal::new(0.0, B_INIT_STD).expect("valid std");
    for target in targets {
        let shape = model.param(&target)?.weight.shape().to_vec();
        let (d_out, d_in) = (shape[0], shape[1]);
        let b_data = (0..d_in * spec.rank)
            .map(|_| T::from_f64_lossy(normal.sample(&mut rng)))
            .collect();
        let adapter = LoraAdapter::new(
            target.clone(),
            Tensor::zeros([d_out, spec.rank]),
            Tensor::new([d_in, spec.rank], b_data)?,
            spec.alpha,
        )?;
        model.adapters_mut().insert(target, adapter);
    }
    Ok(model)
}

/// Parameters `spec` would train on `model`: `r·(d_in + d_out)` per target
/// plus the classification head.
pub fn trainable_parameter_count<T: Element>(
    spec: &AdapterSpec,
    model: &TransformerModel<T>,
) -> Result<usize> {
    spec.validate()?;
    let mut total = 0;
    for target in spec.resolve_targets(model)? {
        let shape = model.param(&target)?.weight.shape();
        total += spec.rank * (shape[0] + shape[1]);
    }
    for head in model.head_names() {
        total += model.param(head)?.weight.numel();
    }
    Ok(total)
}

impl<T: Element> TransformerModel<T> {
    /// Folds every adapter into its base matrix and drops the adapters.
    /// Quantized bases are dequantized first; merged weights are dense.
    pub fn merge_adapters(&mut self) -> Result<()> {
        let adapters = std::mem::take(self.adapters_mut());
        for (target, adapter) in &adapters {
            let p = self.param_mut(target)?;
            let w = p.weight.materialize()?;
            p.weight = Weight::Dense(merge(&w, adapter)?);
        }
        Ok(())
    }

    /// Subtracts previously merged adapters back out and re-attaches them.
    pub fn unmerge_adapters(&mut self, adapters: Vec<LoraAdapter<T>>) -> Result<()> {
        for adapter in adapters {
            let p = self.param_mut(&adapter.target)?;
            let w = p.weight.materialize()?;
            p.weight = Weight::Dense(unmerge(&w, &adapter)?);
            self.adapters_mut().insert(adapter.target.clone(), adapter);
        }
        Ok(())
    }

    /// Replaces the adapter set, checking each one against its base matrix.
    pub fn set_adapters(&mut self, adapters: Vec<LoraAdapter<T>>) -> Result<()> {
        let mut problems = Vec::new();
        for a in &adapters {
            match self.params().get(&a.target) {
                None => problems.push(format!("{}: no such base tensor", a.target)),
                Some(p) if p.weight.shape() != [a.d_out(), a.d_in()] => problems.push(format!(
                    "{}: adapter is [{}, {}], base is {:?}",
                    a.target,
                    a.d_out(),
                    a.d_in(),
                    p.weight.shape()
                )),
                _ => {}
            }
        }
        if !problems.is_empty() {
            return Err(Error::Mismatch(problems));
        }
        let map = self.adapters_mut();
        map.clear();
        for a in adapters {
            map.insert(a.target.clone(), a);
        }
        Ok(())
    }
}
