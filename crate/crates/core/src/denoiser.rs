//! ε-prediction MLP with time, guidance-scale and condition embeddings,
//! and the consistency function built on top of it.
//!
//! Input layout: `[z | silu(time_proj(φ_t)) | silu(omega_proj(φ_ω)) | cond_table[c]]`.
//! Every dense layer computes `x·Wᵀ + b` with `W` stored `out × in`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{NodeId, Tape, Tensor};
use crate::error::{Error, Result};
use crate::lora::{LoraAdapter, LoraNodes};
use crate::rng::Stream;
use crate::schedule::NoiseSchedule;

/// Minimum α(t) accepted when recovering x̂₀ from an ε-estimate.
pub const ALPHA_GUARD: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub data_dim: usize,
    pub hidden: Vec<usize>,
    pub time_dim: usize,
    pub guidance_dim: usize,
    pub cond_dim: usize,
    pub num_classes: usize,
    pub omega_ref: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            data_dim: 2,
            hidden: vec![128, 128, 128],
            time_dim: 16,
            guidance_dim: 8,
            cond_dim: 8,
            num_classes: 8,
            omega_ref: 10.0,
        }
    }
}

impl NetConfig {
    pub fn input_dim(&self) -> usize {
        self.data_dim + self.time_dim + self.guidance_dim + self.cond_dim
    }

    fn validate(&self) -> Result<()> {
        if self.data_dim == 0 || self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::invalid("network widths must be positive"));
        }
        if !self.time_dim.is_multiple_of(2) || !self.guidance_dim.is_multiple_of(2) || self.time_dim == 0 {
            return Err(Error::invalid("embedding sizes must be even and non-zero"));
        }
        if self.guidance_dim == 0 || self.cond_dim == 0 || self.omega_ref <= 0.0 {
            return Err(Error::invalid("guidance/condition embeddings must be non-empty"));
        }
        Ok(())
    }
}

/// Conditioning label; `Null` is the unconditional token ∅ with its own table row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Condition {
    Class(usize),
    Null,
}

/// Per-row conditioning for one batch.
#[derive(Debug, Clone, Copy)]
pub struct Inputs<'a> {
    /// Normalized times `t_n`.
    pub t: &'a [f64],
    pub omega: &'a [f64],
    pub cond: &'a [Condition],
}

/// Parameter tensors bound onto a tape, by name.
#[derive(Debug, Clone, Default)]
pub struct ParamNodes(BTreeMap<String, NodeId>);

impl ParamNodes {
    pub fn get(&self, name: &str) -> Result<NodeId> {
        self.0
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownLayer(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &NodeId)> {
        self.0.iter()
    }

    /// Pairs names with nodes created elsewhere (e.g. by `grad_check`).
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, NodeId)>) -> Self {
        Self(pairs.into_iter().collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserNet {
    config: NetConfig,
    params: BTreeMap<String, Tensor>,
}

fn dense_names(prefix: &str) -> (String, String) {
    (format!("{prefix}.weight"), format!("{prefix}.bias"))
}

impl DenoiserNet {
    pub fn new(config: NetConfig, rng: &mut Stream) -> Result<Self> {
        config.validate()?;
        let mut params = BTreeMap::new();
        let mut dense = |name: &str, out: usize, inp: usize, zero: bool, rng: &mut Stream| {
            // Scaled uniform with a ReLU-family gain; silu behaves similarly.
            let bound = 2f64.sqrt() * (3.0 / inp as f64).sqrt();
            let w: Vec<f64> = (0..out * inp)
                .map(|_| if zero { 0.0 } else { rng.uniform_range(-bound, bound) })
                .collect();
            let (wn, bn) = dense_names(name);
            params.insert(wn, Tensor::from_parts(vec![out, inp], w));
            params.insert(bn, Tensor::zeros(&[out]));
        };

        dense("time_proj", config.time_dim, config.time_dim, false, rng);
        // Zero so the guidance path is inert until something trains it.
        dense("omega_proj", config.guidance_dim, config.guidance_dim, true, rng);

        let mut widths = vec![config.input_dim()];
        widths.extend(&config.hidden);
        widths.push(config.data_dim);
        let last = widths.len() - 2;
        for (i, pair) in widths.windows(2).enumerate() {
            dense(&format!("layer{i}"), pair[1], pair[0], i == last, rng);
        }

        let rows = config.num_classes + 1;
        let table = (0..rows * config.cond_dim).map(|_| rng.normal()).collect();
        params.insert(
            "cond_table".into(),
            Tensor::from_parts(vec![rows, config.cond_dim], table),
        );
        Ok(Self { config, params })
    }

    /// Rebuilds a network from stored tensors, checking names and shapes.
    pub fn from_params(config: NetConfig, params: BTreeMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        let reference = Self::new(config.clone(), &mut crate::rng::Rng::new(0).stream("shape", 0))?;
        if reference.params.len() != params.len() {
            return Err(Error::Incompatible {
                expected: reference.fingerprint(),
                found: fingerprint_of(&params),
            });
        }
        for (name, t) in &reference.params {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                _ => {
                    return Err(Error::Incompatible {
                        expected: reference.fingerprint(),
                        found: fingerprint_of(&params),
                    })
                }
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn param(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::UnknownLayer(name.to_string()))
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::UnknownLayer(name.to_string()))
    }

    /// Names of every dense weight matrix (the LoRA-eligible layers).
    pub fn weight_names(&self) -> Vec<String> {
        self.params
            .keys()
            .filter(|k| k.ends_with(".weight"))
            .cloned()
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Hash of every parameter name and shape; identifies the architecture.
    pub fn fingerprint(&self) -> String {
        fingerprint_of(&self.params)
    }

    pub fn num_layers(&self) -> usize {
        self.config.hidden.len() + 1
    }

    /// Puts every parameter on the tape, trainable or frozen.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> ParamNodes {
        ParamNodes(
            self.params
                .iter()
                .map(|(k, v)| {
                    let id = if trainable {
                        tape.leaf(v.clone())
                    } else {
                        tape.constant(v.clone())
                    };
                    (k.clone(), id)
                })
                .collect(),
        )
    }

    fn cond_row(&self, c: Condition) -> Result<usize> {
        match c {
            Condition::Class(i) if i < self.config.num_classes => Ok(i),
            Condition::Class(i) => Err(Error::UnknownCondition {
                id: i,
                classes: self.config.num_classes,
            }),
            Condition::Null => Ok(self.config.num_classes),
        }
    }

    fn linear(
        &self,
        tape: &mut Tape,
        x: NodeId,
        prefix: &str,
        params: &ParamNodes,
        lora: Option<&LoraNodes>,
    ) -> Result<NodeId> {
        let (wn, bn) = dense_names(prefix);
        let w = params.get(&wn)?;
        let b = params.get(&bn)?;
        let rows = tape.value(x).rows();
        let out = tape.value(w).rows();

        let mut h = tape.matmul_t(x, w)?;
        // Bias as ones(rows×1)·b(1×out); the tape has no row broadcasting.
        let ones = tape.constant(Tensor::full(&[rows, 1], 1.0));
        let b_row = tape.reshape(b, &[1, out])?;
        let bias = tape.matmul(ones, b_row)?;
        h = tape.add(h, bias)?;

        if let Some(entry) = lora.and_then(|l| l.get(&wn)) {
            let xa = tape.matmul_t(x, entry.a)?;
            let mut delta = tape.matmul_t(xa, entry.b)?;
            if entry.scale != 1.0 {
                delta = tape.scale(delta, entry.scale)?;
            }
            h = tape.add(h, delta)?;
        }
        Ok(h)
    }

    /// Records ε_θ(z, ω, c, t) on `tape`.
    pub fn eps_graph(
        &self,
        tape: &mut Tape,
        params: &ParamNodes,
        lora: Option<&LoraNodes>,
        z: NodeId,
        inputs: Inputs<'_>,
    ) -> Result<NodeId> {
        let rows = tape.value(z).rows();
        if tape.value(z).cols() != self.config.data_dim
            || inputs.t.len() != rows
            || inputs.omega.len() != rows
            || inputs.cond.len() != rows
        {
            return Err(Error::Shape {
                op: "eps_graph",
                left: tape.value(z).shape().to_vec(),
                right: vec![inputs.t.len(), inputs.omega.len(), inputs.cond.len()],
            });
        }
        if inputs.omega.iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::invalid("guidance scale must be non-negative"));
        }

        let tf = tape.constant(time_features(inputs.t, self.config.time_dim));
        let th = self.linear(tape, tf, "time_proj", params, lora)?;
        let th = tape.silu(th)?;

        let wf = tape.constant(guidance_features(
            inputs.omega,
            self.config.guidance_dim,
            self.config.omega_ref,
        ));
        let wh = self.linear(tape, wf, "omega_proj", params, lora)?;
        let wh = tape.silu(wh)?;

        let classes = self.config.num_classes + 1;
        let mut onehot = vec![0.0; rows * classes];
        for (r, &c) in inputs.cond.iter().enumerate() {
            onehot[r * classes + self.cond_row(c)?] = 1.0;
        }
        let onehot = tape.constant(Tensor::from_parts(vec![rows, classes], onehot));
        let table = params.get("cond_table")?;
        let ce = tape.matmul(onehot, table)?;

        let mut h = tape.concat_cols(&[z, th, wh, ce])?;
        let last = self.num_layers() - 1;
        for i in 0..=last {
            h = self.linear(tape, h, &format!("layer{i}"), params, lora)?;
            if i < last {
                h = tape.silu(h)?;
            }
        }
        Ok(h)
    }

    /// ε-prediction without gradient tracking, optionally through an adapter.
    pub fn forward_eps(
        &self,
        adapter: Option<&LoraAdapter>,
        z: &Tensor,
        inputs: Inputs<'_>,
    ) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false);
        let lora = adapter.map(|a| a.bind(&mut tape, false));
        let zi = tape.constant(z.clone());
        let out = self.eps_graph(&mut tape, &params, lora.as_ref(), zi, inputs)?;
        Ok(tape.value(out).clone())
    }
}

fn fingerprint_of(params: &BTreeMap<String, Tensor>) -> String {
    let mut h = Sha256::new();
    for (k, v) in params {
        h.update(k.as_bytes());
        h.update(format!("{:?};", v.shape()).as_bytes());
    }
    hex::encode(&h.finalize()[..16])
}

/// Sinusoidal features of normalized time, frequencies geometric in [1, 64].
pub fn time_features(t: &[f64], dim: usize) -> Tensor {
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|j| {
            let frac = if half > 1 { j as f64 / (half - 1) as f64 } else { 0.0 };
            64f64.powf(frac)
        })
        .collect();
    let mut data = Vec::with_capacity(t.len() * dim);
    for &tv in t {
        data.extend(freqs.iter().map(|f| (f * tv).sin()));
        data.extend(freqs.iter().map(|f| (f * tv).cos()));
    }
    Tensor::from_parts(vec![t.len(), dim], data)
}

/// Sinusoidal features of `ω / ω_ref`, shifted so that ω = 0 maps to the zero vector.
pub fn guidance_features(omega: &[f64], dim: usize, omega_ref: f64) -> Tensor {
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half).map(|j| 0.5 * 2f64.powi(j as i32)).collect();
    let mut data = Vec::with_capacity(omega.len() * dim);
    for &w in omega {
        let x = w / omega_ref;
        data.extend(freqs.iter().map(|f| (f * x).sin()));
        data.extend(freqs.iter().map(|f| (f * x).cos() - 1.0));
    }
    Tensor::from_parts(vec![omega.len(), dim], data)
}

/// Skip/output coefficients enforcing `f(z, t_min) = z`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyHead {
    pub sigma_data: f64,
    pub t_min: f64,
}

impl ConsistencyHead {
    pub fn new(schedule: &NoiseSchedule) -> Self {
        Self {
            sigma_data: 0.5,
            t_min: schedule.t_min(),
        }
    }

    /// Rescaled time `u = (t − t_min)/(1 − t_min)`, zero at the boundary.
    pub fn rescale(&self, t: f64) -> f64 {
        (t - self.t_min) / (1.0 - self.t_min)
    }

    pub fn c_skip(&self, u: f64) -> f64 {
        let sd2 = self.sigma_data * self.sigma_data;
        sd2 / (u * u + sd2)
    }

    pub fn c_out(&self, u: f64) -> f64 {
        u / (u * u + self.sigma_data * self.sigma_data).sqrt()
    }
}

/// One consistency-model evaluation site: network, optional adapter, head and schedule.
#[derive(Debug, Clone, Copy)]
pub struct ConsistencyModel<'a> {
    pub net: &'a DenoiserNet,
    pub adapter: Option<&'a LoraAdapter>,
    pub head: ConsistencyHead,
    pub schedule: &'a NoiseSchedule,
}

/// Records `f_θ(z, ω, c, t_n) = c_skip(u)·z + c_out(u)·x̂₀` on `tape`,
/// with `x̂₀ = (z − σ(t_n)·ε_θ)/α(t_n)` and one timestep per row.
#[allow(clippy::too_many_arguments)]
pub fn consistency_graph(
    net: &DenoiserNet,
    head: &ConsistencyHead,
    schedule: &NoiseSchedule,
    tape: &mut Tape,
    params: &ParamNodes,
    lora: Option<&LoraNodes>,
    z: NodeId,
    ns: &[usize],
    omega: &[f64],
    cond: &[Condition],
) -> Result<NodeId> {
    let rows = tape.value(z).rows();
    let cols = tape.value(z).cols();
    if ns.len() != rows {
        return Err(Error::invalid("one timestep per row required"));
    }
    let mut t = Vec::with_capacity(rows);
    let (mut inv_alpha, mut sig_over_alpha, mut skip, mut out) = (
        Vec::with_capacity(rows * cols),
        Vec::with_capacity(rows * cols),
        Vec::with_capacity(rows * cols),
        Vec::with_capacity(rows * cols),
    );
    for &n in ns {
        let p = schedule.point(n)?;
        if p.alpha < ALPHA_GUARD {
            return Err(Error::DegenerateSchedule(p.alpha));
        }
        let u = head.rescale(p.t);
        t.push(p.t);
        inv_alpha.extend(std::iter::repeat_n(1.0 / p.alpha, cols));
        sig_over_alpha.extend(std::iter::repeat_n(p.sigma / p.alpha, cols));
        skip.extend(std::iter::repeat_n(head.c_skip(u), cols));
        out.extend(std::iter::repeat_n(head.c_out(u), cols));
    }
    let eps = net.eps_graph(
        tape,
        params,
        lora,
        z,
        Inputs {
            t: &t,
            omega,
            cond,
        },
    )?;
    let shape = vec![rows, cols];
    let ia = tape.constant(Tensor::from_parts(shape.clone(), inv_alpha));
    let sa = tape.constant(Tensor::from_parts(shape.clone(), sig_over_alpha));
    let cs = tape.constant(Tensor::from_parts(shape.clone(), skip));
    let co = tape.constant(Tensor::from_parts(shape, out));

    let z_scaled = tape.mul(z, ia)?;
    let eps_scaled = tape.mul(eps, sa)?;
    let x0 = tape.sub(z_scaled, eps_scaled)?;
    let skip_term = tape.mul(z, cs)?;
    let out_term = tape.mul(x0, co)?;
    tape.add(skip_term, out_term)
}

impl ConsistencyModel<'_> {
    /// `f_θ` without gradient tracking.
    pub fn predict(
        &self,
        z: &Tensor,
        ns: &[usize],
        omega: &[f64],
        cond: &[Condition],
    ) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = self.net.bind(&mut tape, false);
        let lora = self.adapter.map(|a| a.bind(&mut tape, false));
        let zi = tape.constant(z.clone());
        let f = consistency_graph(
            self.net,
            &self.head,
            self.schedule,
            &mut tape,
            &params,
            lora.as_ref(),
            zi,
            ns,
            omega,
            cond,
        )?;
        Ok(tape.value(f).clone())
    }
}
