//! Low-rank adapters: `h = W₀x + s·B(Ax)`, parameter accounting, merging
//! into the base weights, and the weighted style + acceleration combination.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape, Tensor};
use crate::denoiser::DenoiserNet;
use crate::error::{Error, Result};
use crate::rng::Stream;

/// Factors for one adapted weight `W ∈ R^{d×k}`: `A ∈ R^{r×k}`, `B ∈ R^{d×r}`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraEntry {
    pub a: Tensor,
    pub b: Tensor,
    pub scale: f64,
}

impl LoraEntry {
    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    /// `(d, k)` of the wrapped weight.
    pub fn layer_dims(&self) -> (usize, usize) {
        (self.b.rows(), self.a.cols())
    }

    /// Dense `ΔW = s·B·A`.
    pub fn delta(&self) -> Result<Tensor> {
        Ok(self.b.matmul(&self.a)?.scale(self.scale))
    }

    fn check(&self, layer: &str) -> Result<()> {
        if self.a.shape().len() != 2 || self.b.shape().len() != 2 || self.b.cols() != self.a.rows()
        {
            return Err(Error::AdapterMismatch {
                layer: layer.to_string(),
                adapter: [self.b.shape(), self.a.shape()].concat(),
                layer_shape: vec![],
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraSpec {
    /// Weight names to adapt; empty means every dense weight of the network.
    pub targets: Vec<String>,
    pub rank: usize,
    pub scale: f64,
    /// Cap the rank at `min(d, k)` per layer instead of rejecting it.
    pub clamp_rank: bool,
}

impl Default for LoraSpec {
    fn default() -> Self {
        Self {
            targets: Vec::new(),
            rank: 8,
            scale: 1.0,
            clamp_rank: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    base_fingerprint: String,
    entries: BTreeMap<String, LoraEntry>,
}

/// Adapter factors bound onto a tape.
#[derive(Debug, Clone)]
pub struct LoraNode {
    pub a: NodeId,
    pub b: NodeId,
    pub scale: f64,
}

#[derive(Debug, Clone, Default)]
pub struct LoraNodes(BTreeMap<String, LoraNode>);

impl LoraNodes {
    pub fn get(&self, layer: &str) -> Option<&LoraNode> {
        self.0.get(layer)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &LoraNode)> {
        self.0.iter()
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, LoraNode)>) -> Self {
        Self(pairs.into_iter().collect())
    }
}

impl LoraAdapter {
    pub fn empty(base_fingerprint: impl Into<String>) -> Self {
        Self {
            base_fingerprint: base_fingerprint.into(),
            entries: BTreeMap::new(),
        }
    }

    /// Fresh adapter on `net`: `A ~ N(0, 1/r)`, `B = 0`.
    pub fn attach(net: &DenoiserNet, spec: &LoraSpec, rng: &mut Stream) -> Result<Self> {
        let mut adapter = Self::empty(net.fingerprint());
        adapter.extend(net, spec, rng)?;
        Ok(adapter)
    }

    /// Adds entries for further layers; a layer can only be adapted once.
    pub fn extend(&mut self, net: &DenoiserNet, spec: &LoraSpec, rng: &mut Stream) -> Result<()> {
        if net.fingerprint() != self.base_fingerprint {
            return Err(Error::Incompatible {
                expected: self.base_fingerprint.clone(),
                found: net.fingerprint(),
            });
        }
        if spec.rank == 0 {
            return Err(Error::invalid("LoRA rank must be at least 1"));
        }
        let targets = if spec.targets.is_empty() {
            net.weight_names()
        } else {
            spec.targets.clone()
        };
        for name in targets {
            if !name.ends_with(".weight") {
                return Err(Error::UnknownLayer(name));
            }
            let w = net.param(&name)?;
            if self.entries.contains_key(&name) {
                return Err(Error::AlreadyAttached(name));
            }
            let (d, k) = (w.rows(), w.cols());
            let max = d.min(k);
            let rank = match (spec.rank > max, spec.clamp_rank) {
                (false, _) => spec.rank,
                (true, true) => max,
                (true, false) => {
                    return Err(Error::RankTooLarge {
                        layer: name,
                        rank: spec.rank,
                        max,
                    })
                }
            };
            let std = (1.0 / rank as f64).sqrt();
            let a = Tensor::from_parts(
                vec![rank, k],
                (0..rank * k).map(|_| std * rng.normal()).collect(),
            );
            let b = Tensor::zeros(&[d, rank]);
            self.entries.insert(
                name,
                LoraEntry {
                    a,
                    b,
                    scale: spec.scale,
                },
            );
        }
        Ok(())
    }

    /// Assembles an adapter from stored factors, validating them against `fingerprint`.
    pub fn from_entries(
        base_fingerprint: impl Into<String>,
        entries: BTreeMap<String, LoraEntry>,
    ) -> Result<Self> {
        for (k, e) in &entries {
            e.check(k)?;
        }
        Ok(Self {
            base_fingerprint: base_fingerprint.into(),
            entries,
        })
    }

    pub fn base_fingerprint(&self) -> &str {
        &self.base_fingerprint
    }

    pub fn entries(&self) -> &BTreeMap<String, LoraEntry> {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> impl Iterator<Item = (&String, &mut LoraEntry)> {
        self.entries.iter_mut()
    }

    pub fn get(&self, layer: &str) -> Option<&LoraEntry> {
        self.entries.get(layer)
    }

    pub fn targets(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    /// Trainable scalars: `Σ r·(d + k)` over entries.
    pub fn count_trainable(&self) -> usize {
        self.entries
            .values()
            .map(|e| {
                let (d, k) = e.layer_dims();
                e.rank() * (d + k)
            })
            .sum()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> LoraNodes {
        LoraNodes(
            self.entries
                .iter()
                .map(|(k, e)| {
                    let (a, b) = if trainable {
                        (tape.leaf(e.a.clone()), tape.leaf(e.b.clone()))
                    } else {
                        (tape.constant(e.a.clone()), tape.constant(e.b.clone()))
                    };
                    (
                        k.clone(),
                        LoraNode {
                            a,
                            b,
                            scale: e.scale,
                        },
                    )
                })
                .collect(),
        )
    }

    /// Dense deltas `s·B·A` per adapted layer.
    pub fn materialize(&self) -> Result<BTreeMap<String, Tensor>> {
        self.entries
            .iter()
            .map(|(k, e)| Ok((k.clone(), e.delta()?)))
            .collect()
    }

    /// Checks that every entry fits the corresponding layer of `net`.
    pub fn check_compatible(&self, net: &DenoiserNet) -> Result<()> {
        if net.fingerprint() != self.base_fingerprint {
            return Err(Error::Incompatible {
                expected: self.base_fingerprint.clone(),
                found: net.fingerprint(),
            });
        }
        for (name, e) in &self.entries {
            let w = net.param(name)?;
            let (d, k) = e.layer_dims();
            if w.shape() != [d, k] {
                return Err(Error::AdapterMismatch {
                    layer: name.clone(),
                    adapter: vec![d, k],
                    layer_shape: w.shape().to_vec(),
                });
            }
        }
        Ok(())
    }
}

/// Folds the adapter into the base weights: `W = W₀ + s·B·A`.
pub fn merge(base: &DenoiserNet, adapter: &LoraAdapter) -> Result<DenoiserNet> {
    adapter.check_compatible(base)?;
    let mut merged = base.clone();
    for (name, e) in adapter.entries() {
        let delta = e.delta()?;
        let w = merged.param_mut(name)?;
        let updated = w.add(&delta)?.check_finite("merge")?;
        *w = updated;
    }
    Ok(merged)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Acceleration,
    Style,
    Combined,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub lambda_style: f64,
    pub lambda_accel: f64,
    pub style_source: String,
    pub accel_source: String,
}

/// An adapter together with what it is for and where it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterBundle {
    pub adapter: LoraAdapter,
    pub role: Role,
    pub name: String,
    pub provenance: Option<Provenance>,
}

impl AdapterBundle {
    pub fn new(adapter: LoraAdapter, role: Role, name: impl Into<String>) -> Self {
        Self {
            adapter,
            role,
            name: name.into(),
            provenance: None,
        }
    }
}

pub const DEFAULT_LAMBDA_STYLE: f64 = 0.8;
pub const DEFAULT_LAMBDA_ACCEL: f64 = 1.0;

/// `λ₁·τ_style + λ₂·τ_accel`, stored by rank concatenation:
/// `B = [λ₁s₁B₁ | λ₂s₂B₂]`, `A = [A₁; A₂]`, scale 1. Layers present in
/// only one parent carry that parent's scaled factors alone.
pub fn combine(
    style: &AdapterBundle,
    accel: &AdapterBundle,
    lambda_style: f64,
    lambda_accel: f64,
) -> Result<AdapterBundle> {
    let (sa, aa) = (&style.adapter, &accel.adapter);
    if sa.base_fingerprint != aa.base_fingerprint {
        return Err(Error::Incompatible {
            expected: aa.base_fingerprint.clone(),
            found: sa.base_fingerprint.clone(),
        });
    }
    let scaled = |e: &LoraEntry, lambda: f64| LoraEntry {
        a: e.a.clone(),
        b: e.b.scale(lambda * e.scale),
        scale: 1.0,
    };

    let mut entries = BTreeMap::new();
    let names: std::collections::BTreeSet<&String> =
        sa.entries.keys().chain(aa.entries.keys()).collect();
    for name in names {
        let entry = match (sa.entries.get(name), aa.entries.get(name)) {
            (Some(s), Some(a)) => {
                if s.layer_dims() != a.layer_dims() {
                    let (sd, sk) = s.layer_dims();
                    let (ad, ak) = a.layer_dims();
                    return Err(Error::AdapterMismatch {
                        layer: name.clone(),
                        adapter: vec![sd, sk],
                        layer_shape: vec![ad, ak],
                    });
                }
                let (d, k) = s.layer_dims();
                let (r1, r2) = (s.rank(), a.rank());
                let mut a_data = Vec::with_capacity((r1 + r2) * k);
                a_data.extend_from_slice(s.a.data());
                a_data.extend_from_slice(a.a.data());
                let (b1, b2) = (s.b.scale(lambda_style * s.scale), a.b.scale(lambda_accel * a.scale));
                let mut b_data = Vec::with_capacity(d * (r1 + r2));
                for row in 0..d {
                    b_data.extend_from_slice(b1.row(row));
                    b_data.extend_from_slice(b2.row(row));
                }
                LoraEntry {
                    a: Tensor::new(vec![r1 + r2, k], a_data)?,
                    b: Tensor::new(vec![d, r1 + r2], b_data)?,
                    scale: 1.0,
                }
            }
            (Some(s), None) => scaled(s, lambda_style),
            (None, Some(a)) => scaled(a, lambda_accel),
            (None, None) => unreachable!("name comes from one of the parents"),
        };
        entries.insert(name.clone(), entry);
    }

    Ok(AdapterBundle {
        adapter: LoraAdapter {
            base_fingerprint: aa.base_fingerprint.clone(),
            entries,
        },
        role: Role::Combined,
        name: format!("{lambda_style}*{}+{lambda_accel}*{}", style.name, accel.name),
        provenance: Some(Provenance {
            lambda_style,
            lambda_accel,
            style_source: style.name.clone(),
            accel_source: accel.name.clone(),
        }),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{Condition, Inputs, NetConfig};
    use crate::rng::Rng;

    fn net(seed: u64) -> DenoiserNet {
        let mut n = DenoiserNet::new(
            NetConfig {
                hidden: vec![16, 12],
                ..NetConfig::default()
            },
            &mut Rng::new(seed).stream("net", 0),
        )
        .unwrap();
        // Non-zero output layer so adapters have something to change.
        let mut s = Rng::new(seed).stream("last", 0);
        for v in n.param_mut("layer2.weight").unwrap().data_mut() {
            *v = 0.2 * s.normal();
        }
        n
    }

    fn randomize_b(adapter: &mut LoraAdapter, seed: u64) {
        let mut s = Rng::new(seed).stream("b", 0);
        for (_, e) in adapter.entries_mut() {
            for v in e.b.data_mut() {
                *v = 0.1 * s.normal();
            }
        }
    }

    fn eval(net: &DenoiserNet, adapter: Option<&LoraAdapter>, rows: usize, seed: u64) -> Tensor {
        let mut s = Rng::new(seed).stream("x", 0);
        let z = Tensor::new(vec![rows, 2], s.normals(rows * 2)).unwrap();
        let t: Vec<f64> = (0..rows).map(|_| s.uniform_range(0.02, 1.0)).collect();
        let w: Vec<f64> = (0..rows).map(|_| s.uniform_range(0.0, 14.0)).collect();
        let c: Vec<Condition> = (0..rows).map(|i| Condition::Class(i % 8)).collect();
        net.forward_eps(
            adapter,
            &z,
            Inputs {
                t: &t,
                omega: &w,
                cond: &c,
            },
        )
        .unwrap()
    }

    #[test]
    fn fresh_adapter_is_identity() {
        let n = net(1);
        let adapter =
            LoraAdapter::attach(&n, &LoraSpec::default(), &mut Rng::new(2).stream("a", 0)).unwrap();
        assert!(adapter.entries().values().all(|e| e.b.data().iter().all(|&v| v == 0.0)));
        let base = eval(&n, None, 32, 3);
        let adapted = eval(&n, Some(&adapter), 32, 3);
        assert_eq!(base.max_abs_diff(&adapted).unwrap(), 0.0);
    }

    #[test]
    fn rank_bounds_and_double_attach() {
        let n = net(1);
        let mut rng = Rng::new(0).stream("a", 0);
        let spec = |rank| LoraSpec {
            targets: vec!["layer1.weight".into()],
            rank,
            scale: 1.0,
            clamp_rank: false,
        };
        // layer1 is 12×16.
        let ok = LoraAdapter::attach(&n, &spec(12), &mut rng).unwrap();
        let e = ok.get("layer1.weight").unwrap();
        assert_eq!((e.a.shape(), e.b.shape()), (&[12, 16][..], &[12, 12][..]));
        assert!(matches!(
            LoraAdapter::attach(&n, &spec(13), &mut rng),
            Err(Error::RankTooLarge { max: 12, .. })
        ));
        let mut twice = ok.clone();
        assert!(matches!(
            twice.extend(&n, &spec(2), &mut rng),
            Err(Error::AlreadyAttached(_))
        ));
        let unknown = LoraSpec {
            targets: vec!["layer9.weight".into()],
            ..spec(2)
        };
        assert!(matches!(
            LoraAdapter::attach(&n, &unknown, &mut rng),
            Err(Error::UnknownLayer(_))
        ));
        let bias = LoraSpec {
            targets: vec!["layer1.bias".into()],
            ..spec(2)
        };
        assert!(LoraAdapter::attach(&n, &bias, &mut rng).is_err());
    }

    #[test]
    fn shapes_for_a_wide_layer() {
        let n = DenoiserNet::new(NetConfig::default(), &mut Rng::new(0).stream("n", 0)).unwrap();
        let spec = LoraSpec {
            targets: vec!["layer1.weight".into()],
            rank: 4,
            ..LoraSpec::default()
        };
        let a = LoraAdapter::attach(&n, &spec, &mut Rng::new(0).stream("a", 0)).unwrap();
        let e = a.get("layer1.weight").unwrap();
        assert_eq!(e.a.shape(), &[4, 128]);
        assert_eq!(e.b.shape(), &[128, 4]);
    }

    fn toy_entry(d: usize, k: usize, r: usize) -> LoraEntry {
        LoraEntry {
            a: Tensor::zeros(&[r, k]),
            b: Tensor::zeros(&[d, r]),
            scale: 1.0,
        }
    }

    #[test]
    fn count_trainable_examples() {
        let single = LoraAdapter::from_entries(
            "toy",
            BTreeMap::from([("w.weight".to_string(), toy_entry(4, 6, 2))]),
        )
        .unwrap();
        assert_eq!(single.count_trainable(), 20);
        let two = LoraAdapter::from_entries(
            "toy",
            BTreeMap::from([
                ("a.weight".to_string(), toy_entry(128, 128, 4)),
                ("b.weight".to_string(), toy_entry(128, 2, 4)),
            ]),
        )
        .unwrap();
        assert_eq!(two.count_trainable(), 1544);
    }

    #[test]
    fn merge_hand_example() {
        let e = LoraEntry {
            a: Tensor::from_rows(&[vec![0., 1.]]).unwrap(),
            b: Tensor::from_rows(&[vec![1.], vec![0.]]).unwrap(),
            scale: 1.0,
        };
        let w = Tensor::identity(2).add(&e.delta().unwrap()).unwrap();
        assert_eq!(w.data(), &[1., 1., 0., 1.]);
    }

    #[test]
    fn merge_matches_adapter_path() {
        let n = net(4);
        let mut adapter =
            LoraAdapter::attach(&n, &LoraSpec { scale: 0.7, ..LoraSpec::default() }, &mut Rng::new(5).stream("a", 0))
                .unwrap();
        let zero_merge = merge(&n, &adapter).unwrap();
        assert_eq!(zero_merge, n);
        randomize_b(&mut adapter, 6);
        let merged = merge(&n, &adapter).unwrap();
        let via_adapter = eval(&n, Some(&adapter), 64, 7);
        let via_merge = eval(&merged, None, 64, 7);
        for (m, a) in via_merge.data().iter().zip(via_adapter.data()) {
            assert!((m - a).abs() <= 1e-10 * (1.0 + m.abs()));
        }
    }

    #[test]
    fn merge_rejects_foreign_adapter() {
        let n = net(1);
        let other = DenoiserNet::new(NetConfig::default(), &mut Rng::new(0).stream("n", 0)).unwrap();
        let a = LoraAdapter::attach(&other, &LoraSpec::default(), &mut Rng::new(0).stream("a", 0))
            .unwrap();
        assert!(matches!(merge(&n, &a), Err(Error::Incompatible { .. })));
    }

    #[test]
    fn combine_matches_dense_sum_and_degenerates() {
        let n = net(8);
        let mut s_rng = Rng::new(9).stream("a", 0);
        let mut style = LoraAdapter::attach(
            &n,
            &LoraSpec {
                rank: 3,
                scale: 0.5,
                ..LoraSpec::default()
            },
            &mut s_rng,
        )
        .unwrap();
        let mut accel = LoraAdapter::attach(
            &n,
            &LoraSpec {
                targets: vec!["layer0.weight".into(), "layer1.weight".into()],
                rank: 5,
                scale: 1.3,
                clamp_rank: true,
            },
            &mut s_rng,
        )
        .unwrap();
        randomize_b(&mut style, 10);
        randomize_b(&mut accel, 11);
        let sb = AdapterBundle::new(style.clone(), Role::Style, "style");
        let ab = AdapterBundle::new(accel.clone(), Role::Acceleration, "accel");

        let comb = combine(&sb, &ab, 0.8, 1.0).unwrap();
        assert_eq!(comb.role, Role::Combined);
        let prov = comb.provenance.as_ref().unwrap();
        assert_eq!((prov.lambda_style, prov.lambda_accel), (0.8, 1.0));
        assert_eq!(comb.adapter.get("layer1.weight").unwrap().rank(), 3 + 5);

        let dense = comb.adapter.materialize().unwrap();
        let ds = style.materialize().unwrap();
        let da = accel.materialize().unwrap();
        for (name, delta) in &dense {
            let mut expected = Tensor::zeros(delta.shape());
            if let Some(d) = ds.get(name) {
                expected = expected.add(&d.scale(0.8)).unwrap();
            }
            if let Some(d) = da.get(name) {
                expected = expected.add(&d.scale(1.0)).unwrap();
            }
            assert!(delta.max_abs_diff(&expected).unwrap() < 1e-12, "{name}");
        }

        let only_accel = combine(&sb, &ab, 0.0, 1.0).unwrap();
        let a = eval(&n, Some(&only_accel.adapter), 16, 12);
        let b = eval(&n, Some(&accel), 16, 12);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= 1e-10 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn combine_rejects_mismatched_dims() {
        let e1 = BTreeMap::from([("w.weight".to_string(), toy_entry(4, 6, 2))]);
        let e2 = BTreeMap::from([("w.weight".to_string(), toy_entry(4, 5, 2))]);
        let s = AdapterBundle::new(LoraAdapter::from_entries("x", e1).unwrap(), Role::Style, "s");
        let a = AdapterBundle::new(
            LoraAdapter::from_entries("x", e2).unwrap(),
            Role::Acceleration,
            "a",
        );
        assert!(matches!(
            combine(&s, &a, 0.8, 1.0),
            Err(Error::AdapterMismatch { .. })
        ));
    }
}
