use alloc::format;

use crate::error::{Error, Result};
use crate::numkit::{Fnv, Matrix, Mlp, Tape};

#[derive(Clone, Debug, PartialEq)]
pub enum ProjectorKind {
    Identity { dim: usize },
    /// `y = x W` with `W` of shape `d x D`.
    Linear { weight: Matrix },
    /// First `layers` layers of a trained classifier, SiLU after each.
    Encoder { mlp: Mlp, layers: usize },
}

/// Map from data space to the feature space where distances are measured.
#[derive(Clone, Debug, PartialEq)]
pub struct Projector {
    pub kind: ProjectorKind,
    /// Divide each projected row by its Euclidean norm.
    pub l2_normalize: bool,
}

const NORM_FLOOR: f64 = 1e-12;

impl Projector {
    pub fn identity(dim: usize) -> Self {
        Self { kind: ProjectorKind::Identity { dim }, l2_normalize: false }
    }

    pub fn linear(weight: Matrix) -> Self {
        Self { kind: ProjectorKind::Linear { weight }, l2_normalize: false }
    }

    pub fn encoder(mlp: Mlp, layers: usize) -> Result<Self> {
        if layers == 0 || layers > mlp.layers.len() {
            return Err(Error::Projector(format!("encoder depth {layers} outside 1..={}", mlp.layers.len())));
        }
        Ok(Self { kind: ProjectorKind::Encoder { mlp, layers }, l2_normalize: false })
    }

    pub fn with_l2_normalize(mut self, on: bool) -> Self {
        self.l2_normalize = on;
        self
    }

    pub fn input_dim(&self) -> usize {
        match &self.kind {
            ProjectorKind::Identity { dim } => *dim,
            ProjectorKind::Linear { weight } => weight.rows(),
            ProjectorKind::Encoder { mlp, .. } => mlp.input_dim(),
        }
    }

    pub fn output_dim(&self) -> usize {
        match &self.kind {
            ProjectorKind::Identity { dim } => *dim,
            ProjectorKind::Linear { weight } => weight.cols(),
            ProjectorKind::Encoder { mlp, layers } => mlp.layers[*layers - 1].weight.cols(),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match &self.kind {
            ProjectorKind::Identity { .. } => "identity",
            ProjectorKind::Linear { .. } => "random-linear",
            ProjectorKind::Encoder { .. } => "trained-encoder",
        }
    }

    /// Hash of the kind and every parameter bit.
    pub fn id(&self) -> u64 {
        let mut h = Fnv::new();
        h.write(self.kind_name().as_bytes());
        h.write(&[u8::from(self.l2_normalize)]);
        match &self.kind {
            ProjectorKind::Identity { dim } => h.write_u64(*dim as u64),
            ProjectorKind::Linear { weight } => h.write_u64(weight.checksum()),
            ProjectorKind::Encoder { mlp, layers } => {
                h.write_u64(*layers as u64);
                for l in mlp.layers.iter().take(*layers) {
                    h.write_u64(l.weight.checksum());
                    h.write_u64(l.bias.checksum());
                }
            }
        }
        h.finish()
    }

    fn check_input(&self, batch: &Matrix) -> Result<()> {
        if batch.cols() != self.input_dim() {
            return Err(Error::Projector(format!(
                "batch has {} columns, projector expects {}",
                batch.cols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    fn raw(&self, batch: &Matrix) -> Result<Matrix> {
        match &self.kind {
            ProjectorKind::Identity { .. } => Ok(batch.clone()),
            ProjectorKind::Linear { weight } => batch.matmul(weight),
            ProjectorKind::Encoder { mlp, layers } => mlp.forward_prefix(batch, *layers, true),
        }
    }

    /// Row-wise projection.
    pub fn apply(&self, batch: &Matrix) -> Result<Matrix> {
        self.check_input(batch)?;
        let mut out = self.raw(batch)?;
        if self.l2_normalize {
            for r in 0..out.rows() {
                let row = out.row_mut(r);
                let n = libm::sqrt(row.iter().map(|v| v * v).sum::<f64>()).max(NORM_FLOOR);
                row.iter_mut().for_each(|v| *v /= n);
            }
        }
        Ok(out)
    }

    /// Gradient with respect to `batch` of `<upstream, apply(batch)>`.
    pub fn vjp(&self, batch: &Matrix, upstream: &Matrix) -> Result<Matrix> {
        self.check_input(batch)?;
        upstream.ensure_shape("projector upstream", (batch.rows(), self.output_dim()))?;
        let upstream = if self.l2_normalize {
            let raw = self.raw(batch)?;
            let mut g = upstream.clone();
            for r in 0..raw.rows() {
                let f = raw.row(r);
                let n = libm::sqrt(f.iter().map(|v| v * v).sum::<f64>()).max(NORM_FLOOR);
                let dot: f64 = f.iter().zip(upstream.row(r)).map(|(a, b)| a * b).sum::<f64>() / n;
                for (gv, &fv) in g.row_mut(r).iter_mut().zip(f) {
                    // (I - y yᵀ) u / n with y = f / n
                    *gv = (*gv - fv / n * dot) / n;
                }
            }
            g
        } else {
            upstream.clone()
        };
        match &self.kind {
            ProjectorKind::Identity { .. } => Ok(upstream),
            ProjectorKind::Linear { weight } => upstream.matmul_t(weight),
            ProjectorKind::Encoder { mlp, layers } => {
                let mut tape = Tape::new();
                let vars = mlp.bind_frozen(&mut tape);
                let x = tape.leaf(batch.clone());
                let y = mlp.forward_tape_prefix(&mut tape, &vars, x, *layers, true)?;
                let grads = tape.backward(y, upstream)?;
                Ok(grads.get(x))
            }
        }
    }

    /// Projects `batch` and tags the result with this projector's id.
    pub fn project(&self, batch: &Matrix, source: Source) -> Result<FeatureSet> {
        Ok(FeatureSet { features: self.apply(batch)?, projector_id: self.id(), source })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Real,
    Generated,
}

impl Source {
    pub fn name(self) -> &'static str {
        match self {
            Source::Real => "real",
            Source::Generated => "generated",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "real" => Ok(Source::Real),
            "generated" => Ok(Source::Generated),
            other => Err(Error::Projector(format!("unknown source tag {other:?}"))),
        }
    }
}

/// Projected points, tagged with the projector that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub features: Matrix,
    pub projector_id: u64,
    pub source: Source,
}

impl FeatureSet {
    pub fn new(features: Matrix, projector_id: u64, source: Source) -> Result<Self> {
        if !features.all_finite() {
            return Err(Error::Numerical("non-finite feature"));
        }
        Ok(Self { features, projector_id, source })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Fails unless both sets come from the same projector.
    pub fn check_compatible(&self, other: &FeatureSet) -> Result<()> {
        if self.projector_id != other.projector_id {
            return Err(Error::Projector(format!(
                "feature sets from different projectors ({:016x} vs {:016x})",
                self.projector_id, other.projector_id
            )));
        }
        if self.dim() != other.dim() {
            return Err(Error::Dimension { op: "feature sets", expected: (other.len(), self.dim()), got: other.features.shape() });
        }
        Ok(())
    }

    pub fn subset(&self, rows: &[usize]) -> FeatureSet {
        FeatureSet { features: self.features.select_rows(rows), projector_id: self.projector_id, source: self.source }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::{gauss, RngStream};

    #[test]
    fn identity_returns_input() {
        let x = gauss(&mut RngStream::new(1), 5, 3);
        let p = Projector::identity(3);
        assert_eq!(p.apply(&x).unwrap(), x);
        assert_eq!(p.vjp(&x, &x).unwrap(), x);
    }

    #[test]
    fn swap_matrix() {
        let p = Projector::linear(Matrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]]).unwrap());
        let y = p.apply(&Matrix::row_vector(&[3.0, 4.0])).unwrap();
        assert_eq!(y.as_slice(), &[4.0, 3.0]);
    }

    #[test]
    fn ids_follow_parameters() {
        let w = gauss(&mut RngStream::new(2), 2, 4);
        assert_eq!(Projector::linear(w.clone()).id(), Projector::linear(w.clone()).id());
        assert_ne!(Projector::linear(w.clone()).id(), Projector::linear(w.scale(2.0)).id());
        assert_ne!(Projector::identity(2).id(), Projector::identity(2).with_l2_normalize(true).id());
    }

    #[test]
    fn dimension_mismatch_is_projector_error() {
        let p = Projector::identity(3);
        assert!(matches!(p.apply(&Matrix::zeros(2, 2)), Err(Error::Projector(_))));
    }

    #[test]
    fn mixing_projectors_is_rejected() {
        let x = Matrix::zeros(3, 2);
        let a = Projector::identity(2).project(&x, Source::Real).unwrap();
        let b = Projector::linear(Matrix::identity(2)).project(&x, Source::Generated).unwrap();
        assert!(a.check_compatible(&b).is_err());
    }
}
