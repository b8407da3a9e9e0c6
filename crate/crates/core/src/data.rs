//! Toy 2-D datasets and the latent encoder.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetKind {
    /// Eight Gaussians evenly spaced on a circle; condition = component.
    Ring8 {
        #[serde(default = "default_radius")]
        radius: f64,
        #[serde(default = "default_ring_std")]
        std: f64,
    },
    /// Uniform over the dark cells of a 4×4 board on `[-2, 2]²`;
    /// condition = dark-cell index (0..8).
    Checkerboard {
        #[serde(default = "default_half_width")]
        half_width: f64,
    },
    /// `N(mean, std²·I)`, single condition 0.
    SingleGaussian { mean: Vec<f64>, std: f64 },
    /// Another dataset rotated counter-clockwise in the first two coordinates.
    Rotated {
        base: Box<DatasetKind>,
        angle_deg: f64,
    },
}

fn default_radius() -> f64 {
    2.0
}

fn default_ring_std() -> f64 {
    0.1
}

fn default_half_width() -> f64 {
    2.0
}

impl Default for DatasetKind {
    fn default() -> Self {
        Self::ring8()
    }
}

/// Points plus their per-sample condition ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub points: Tensor,
    pub cond: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.cond.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cond.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points.cols()
    }
}

impl DatasetKind {
    pub fn ring8() -> Self {
        Self::Ring8 {
            radius: default_radius(),
            std: default_ring_std(),
        }
    }

    pub fn rotated(self, angle_deg: f64) -> Self {
        Self::Rotated {
            base: Box::new(self),
            angle_deg,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::SingleGaussian { mean, .. } => mean.len(),
            Self::Rotated { base, .. } => base.dim(),
            _ => 2,
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            Self::Ring8 { .. } | Self::Checkerboard { .. } => 8,
            Self::SingleGaussian { .. } => 1,
            Self::Rotated { base, .. } => base.num_classes(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            Self::Ring8 { radius, std } => *radius > 0.0 && *std > 0.0,
            Self::Checkerboard { half_width } => *half_width > 0.0,
            Self::SingleGaussian { mean, std } => {
                !mean.is_empty() && *std > 0.0 && mean.iter().all(|m| m.is_finite())
            }
            Self::Rotated { base, angle_deg } => {
                base.validate()?;
                angle_deg.is_finite() && base.dim() >= 2
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid dataset parameters: {self:?}")))
        }
    }

    /// Draws `n` points; sample `i` uses its own stream, so any prefix of a
    /// larger draw is identical to a smaller draw with the same seed.
    pub fn sample(&self, n: usize, rng: &Rng) -> Result<Dataset> {
        self.validate()?;
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        let dim = self.dim();
        let mut data = Vec::with_capacity(n * dim);
        let mut cond = Vec::with_capacity(n);
        for i in 0..n {
            let mut s = rng.stream("dataset", i as u64);
            let c = self.draw(&mut s, &mut data);
            cond.push(c);
        }
        Ok(Dataset {
            points: Tensor::new(vec![n, dim], data)?,
            cond,
        })
    }

    fn draw(&self, s: &mut crate::rng::Stream, out: &mut Vec<f64>) -> usize {
        match self {
            Self::Ring8 { radius, std } => {
                let c = s.int_inclusive(0, 7);
                let th = 2.0 * PI * c as f64 / 8.0;
                out.push(radius * th.cos() + std * s.normal());
                out.push(radius * th.sin() + std * s.normal());
                c
            }
            Self::Checkerboard { half_width } => {
                let c = s.int_inclusive(0, 7);
                // Dark cells are those with (row + col) even.
                let row = c / 2;
                let col = 2 * (c % 2) + row % 2;
                let cell = 2.0 * half_width / 4.0;
                out.push(-half_width + cell * (col as f64 + s.uniform()));
                out.push(-half_width + cell * (row as f64 + s.uniform()));
                c
            }
            Self::SingleGaussian { mean, std } => {
                out.extend(mean.iter().map(|m| m + std * s.normal()));
                0
            }
            Self::Rotated { base, angle_deg } => {
                let start = out.len();
                let c = base.draw(s, out);
                let (sin, cos) = angle_deg.to_radians().sin_cos();
                let (x, y) = (out[start], out[start + 1]);
                out[start] = cos * x - sin * y;
                out[start + 1] = sin * x + cos * y;
                c
            }
        }
    }
}

/// Maps data to latents. The affine variant stores its inverse for decoding.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Encoder {
    #[default]
    Identity,
    FixedAffine {
        matrix: Vec<Vec<f64>>,
        offset: Vec<f64>,
    },
}

impl Encoder {
    pub fn affine(matrix: Vec<Vec<f64>>, offset: Vec<f64>) -> Result<Self> {
        let e = Self::FixedAffine { matrix, offset };
        e.inverse_matrix()?;
        Ok(e)
    }

    fn check_dim(&self, x: &Tensor) -> Result<()> {
        if let Self::FixedAffine { offset, .. } = self {
            if x.cols() != offset.len() {
                return Err(Error::Shape {
                    op: "encoder",
                    left: x.shape().to_vec(),
                    right: vec![offset.len()],
                });
            }
        }
        Ok(())
    }

    fn inverse_matrix(&self) -> Result<Option<Tensor>> {
        let Self::FixedAffine { matrix, offset } = self else {
            return Ok(None);
        };
        let d = offset.len();
        if d == 0 || matrix.len() != d || matrix.iter().any(|r| r.len() != d) {
            return Err(Error::invalid("affine encoder needs a square matrix matching its offset"));
        }
        Ok(Some(invert(&Tensor::from_rows(matrix)?)?))
    }

    /// `z = M·x + b` per row.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        self.check_dim(x)?;
        match self {
            Self::Identity => Ok(x.clone()),
            Self::FixedAffine { matrix, offset } => {
                let m = Tensor::from_rows(matrix)?;
                let mut z = x.matmul(&m.transpose())?;
                add_row(&mut z, offset, 1.0);
                Ok(z)
            }
        }
    }

    /// `x = M⁻¹·(z − b)` per row.
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        self.check_dim(z)?;
        match (self, self.inverse_matrix()?) {
            (Self::FixedAffine { offset, .. }, Some(inv)) => {
                let mut shifted = z.clone();
                add_row(&mut shifted, offset, -1.0);
                shifted.matmul(&inv.transpose())
            }
            _ => Ok(z.clone()),
        }
    }

    pub fn encode_dataset(&self, data: &Dataset) -> Result<Dataset> {
        Ok(Dataset {
            points: self.encode(&data.points)?,
            cond: data.cond.clone(),
        })
    }
}

fn add_row(t: &mut Tensor, row: &[f64], sign: f64) {
    let cols = row.len();
    for (i, v) in t.data_mut().iter_mut().enumerate() {
        *v += sign * row[i % cols];
    }
}

/// Gauss-Jordan inverse with partial pivoting.
fn invert(m: &Tensor) -> Result<Tensor> {
    let n = m.rows();
    let mut a: Vec<Vec<f64>> = (0..n).map(|r| m.row(r).to_vec()).collect();
    let mut inv: Vec<Vec<f64>> = (0..n)
        .map(|r| (0..n).map(|c| f64::from(u8::from(r == c))).collect())
        .collect();
    let scale = m.data().iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap_or(col);
        if a[pivot][col].abs() <= 1e-12 * scale.max(1.0) {
            return Err(Error::invalid("affine encoder matrix is singular"));
        }
        a.swap(col, pivot);
        inv.swap(col, pivot);
        let p = a[col][col];
        for c in 0..n {
            a[col][c] /= p;
            inv[col][c] /= p;
        }
        for r in 0..n {
            if r != col {
                let f = a[r][col];
                for c in 0..n {
                    a[r][c] -= f * a[col][c];
                    inv[r][c] -= f * inv[col][c];
                }
            }
        }
    }
    Tensor::from_rows(&inv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ring_components_match_conditions() {
        let d = DatasetKind::ring8().sample(2000, &Rng::new(1)).unwrap();
        for i in 0..d.len() {
            let th = 2.0 * PI * d.cond[i] as f64 / 8.0;
            let (x, y) = (d.points.at(i, 0), d.points.at(i, 1));
            let dist = ((x - 2.0 * th.cos()).powi(2) + (y - 2.0 * th.sin()).powi(2)).sqrt();
            assert!(dist < 0.6, "sample {i} far from its component");
        }
        let mut counts = [0usize; 8];
        d.cond.iter().for_each(|&c| counts[c] += 1);
        assert!(counts.iter().all(|&c| c > 150));
    }

    #[test]
    fn sampling_is_reproducible_and_prefix_stable() {
        let k = DatasetKind::ring8();
        let a = k.sample(100, &Rng::new(9)).unwrap();
        let b = k.sample(50, &Rng::new(9)).unwrap();
        assert_eq!(&a.points.data()[..100], b.points.data());
        assert_ne!(a, k.sample(100, &Rng::new(10)).unwrap());
    }

    #[test]
    fn checkerboard_points_lie_on_dark_cells() {
        let d = DatasetKind::Checkerboard { half_width: 2.0 }.sample(500, &Rng::new(2)).unwrap();
        for i in 0..d.len() {
            let col = ((d.points.at(i, 0) + 2.0) / 1.0).floor() as usize;
            let row = ((d.points.at(i, 1) + 2.0) / 1.0).floor() as usize;
            assert_eq!((row + col) % 2, 0);
            assert_eq!(d.cond[i], row * 2 + col / 2);
        }
    }

    #[test]
    fn rotation_preserves_norm_and_condition() {
        let base = DatasetKind::ring8();
        let a = base.clone().sample(200, &Rng::new(3)).unwrap();
        let b = base.rotated(22.5).sample(200, &Rng::new(3)).unwrap();
        assert_eq!(a.cond, b.cond);
        for i in 0..200 {
            let na = a.points.row(i).iter().map(|v| v * v).sum::<f64>();
            let nb = b.points.row(i).iter().map(|v| v * v).sum::<f64>();
            assert!((na - nb).abs() < 1e-12);
        }
        let (x, y) = (a.points.at(0, 0), a.points.at(0, 1));
        let th = 22.5f64.to_radians();
        assert!((b.points.at(0, 0) - (th.cos() * x - th.sin() * y)).abs() < 1e-12);
    }

    #[test]
    fn gaussian_moments() {
        let k = DatasetKind::SingleGaussian { mean: vec![2.0, 0.0], std: 0.5 };
        let d = k.sample(20_000, &Rng::new(4)).unwrap();
        let mean_x = (0..d.len()).map(|i| d.points.at(i, 0)).sum::<f64>() / d.len() as f64;
        assert!((mean_x - 2.0).abs() < 3.0 * 0.5 / (d.len() as f64).sqrt() * 1.5);
        assert!(d.cond.iter().all(|&c| c == 0));
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        assert!(DatasetKind::Ring8 { radius: 2.0, std: 0.0 }.sample(4, &Rng::new(0)).is_err());
        assert!(matches!(
            DatasetKind::ring8().sample(0, &Rng::new(0)),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn affine_round_trip() {
        let e = Encoder::affine(vec![vec![2.0, 1.0], vec![-0.5, 3.0]], vec![0.1, -4.0]).unwrap();
        let x = DatasetKind::ring8().sample(64, &Rng::new(5)).unwrap().points;
        let z = e.encode(&x).unwrap();
        assert!(z.max_abs_diff(&x).unwrap() > 0.1);
        assert!(e.decode(&z).unwrap().max_abs_diff(&x).unwrap() < 1e-12);
        assert!((z.at(0, 0) - (2.0 * x.at(0, 0) + x.at(0, 1) + 0.1)).abs() < 1e-12);
    }

    #[test]
    fn identity_and_singular_encoders() {
        let x = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(Encoder::Identity.encode(&x).unwrap(), x);
        assert_eq!(Encoder::Identity.decode(&x).unwrap(), x);
        assert!(Encoder::affine(vec![vec![1.0, 2.0], vec![2.0, 4.0]], vec![0.0, 0.0]).is_err());
    }

    #[test]
    fn dataset_kind_json() {
        let k: DatasetKind =
            serde_json::from_str(r#"{"kind":"rotated","base":{"kind":"ring8"},"angle_deg":22.5}"#).unwrap();
        assert_eq!(k, DatasetKind::ring8().rotated(22.5));
        assert!(serde_json::from_str::<DatasetKind>(r#"{"kind":"ring8","radus":2}"#).is_err());
    }
}
