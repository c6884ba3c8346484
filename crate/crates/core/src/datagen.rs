//! Seeded class-conditional point datasets and their train / validation /
//! exemplar splits.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::error::{Error, Result};
use crate::numkit::{Matrix, RngStream};

const GEOMETRY_STREAM: u64 = 0;
const DRAW_STREAM: u64 = 1;
const CENTER_ATTEMPTS: usize = 20_000;

/// Layout of the per-class mode centers. Every family is a Gaussian mixture;
/// they differ only in where the centers sit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Family {
    /// Centers uniform in a box, rejection-sampled for separation.
    GaussMixture,
    /// Class `c` places its modes evenly on a circle of radius `(c + 1) / C`
    /// times the box half-width, in the first two coordinates.
    Rings,
    /// Each class is a half-moon arc of modes around a random anchor.
    MoonsPerClass,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::GaussMixture => "gauss-mixture",
            Family::Rings => "rings",
            Family::MoonsPerClass => "moons-per-class",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gauss-mixture" => Ok(Family::GaussMixture),
            "rings" => Ok(Family::Rings),
            "moons-per-class" => Ok(Family::MoonsPerClass),
            other => Err(Error::Spec(format!("unknown family {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub family: Family,
    pub dim: usize,
    pub classes: usize,
    pub groups: usize,
    pub modes: usize,
    pub spread: f64,
    /// One translation per group; empty means all zero.
    pub group_shifts: Vec<Vec<f64>>,
    /// Relative mode frequencies, permuted independently per class; empty
    /// means uniform.
    pub mode_weights: Vec<f64>,
    /// Explicit centers, `classes * modes` rows in class-major order; empty
    /// means the family layout decides.
    pub centers: Vec<Vec<f64>>,
    /// Half-width of the box the family layout uses.
    pub center_scale: f64,
    pub train_per_class: usize,
    pub val_per_class: usize,
    /// Drives the center layout.
    pub seed: u64,
    /// Drives the point draws; defaults to `seed`.
    pub sample_seed: Option<u64>,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            family: Family::GaussMixture,
            dim: 2,
            classes: 8,
            groups: 1,
            modes: 4,
            spread: 0.1,
            group_shifts: Vec::new(),
            mode_weights: Vec::new(),
            centers: Vec::new(),
            center_scale: 2.0,
            train_per_class: 1000,
            val_per_class: 500,
            seed: 0,
            sample_seed: None,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Spec(m.into()));
        if !(2..=16).contains(&self.dim) {
            return bad("dim must lie in [2, 16]");
        }
        if self.classes == 0 || self.groups == 0 || self.modes == 0 {
            return bad("classes, groups and modes must all be >= 1");
        }
        if !(self.spread > 0.0) || !self.spread.is_finite() {
            return bad("spread must be > 0");
        }
        if self.train_per_class == 0 || self.val_per_class == 0 {
            return bad("per-class sample counts must be >= 1");
        }
        if !self.group_shifts.is_empty()
            && (self.group_shifts.len() != self.groups || self.group_shifts.iter().any(|s| s.len() != self.dim))
        {
            return bad("group_shifts must have one dim-length vector per group");
        }
        if !self.mode_weights.is_empty()
            && (self.mode_weights.len() != self.modes || self.mode_weights.iter().any(|w| !(*w > 0.0)))
        {
            return bad("mode_weights must have one positive weight per mode");
        }
        if !self.centers.is_empty()
            && (self.centers.len() != self.classes * self.modes || self.centers.iter().any(|c| c.len() != self.dim))
        {
            return bad("centers must list classes * modes dim-length vectors");
        }
        if !(self.center_scale > 0.0) {
            return bad("center_scale must be > 0");
        }
        Ok(())
    }

    /// Same geometry with every group shift multiplied by `factor`.
    pub fn shifted(&self, factor: f64) -> Self {
        let mut s = self.clone();
        for shift in &mut s.group_shifts {
            shift.iter_mut().for_each(|v| *v *= factor);
        }
        s
    }

    pub fn per_class(&self) -> usize {
        self.train_per_class + self.val_per_class
    }
}

/// Points with class labels and optional group labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSet {
    pub points: Matrix,
    pub classes: Vec<usize>,
    pub groups: Option<Vec<usize>>,
    pub num_classes: usize,
    pub num_groups: usize,
}

impl LabeledSet {
    pub fn new(points: Matrix, classes: Vec<usize>, groups: Option<Vec<usize>>, num_classes: usize, num_groups: usize) -> Result<Self> {
        let n = points.rows();
        if classes.len() != n || groups.as_ref().is_some_and(|g| g.len() != n) {
            return Err(Error::Dimension { op: "LabeledSet::new", expected: (n, 1), got: (classes.len(), 1) });
        }
        if let Some(&c) = classes.iter().find(|&&c| c >= num_classes) {
            return Err(Error::Range { what: "class label", value: c, lo: 0, hi: num_classes.saturating_sub(1) });
        }
        if let Some(&g) = groups.iter().flatten().find(|&&g| g >= num_groups) {
            return Err(Error::Range { what: "group label", value: g, lo: 0, hi: num_groups.saturating_sub(1) });
        }
        Ok(Self { points, classes, groups, num_classes, num_groups })
    }

    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.cols()
    }

    pub fn subset(&self, rows: &[usize]) -> LabeledSet {
        LabeledSet {
            points: self.points.select_rows(rows),
            classes: rows.iter().map(|&r| self.classes[r]).collect(),
            groups: self.groups.as_ref().map(|g| rows.iter().map(|&r| g[r]).collect()),
            num_classes: self.num_classes,
            num_groups: self.num_groups,
        }
    }

    pub fn rows_of_class(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&r| self.classes[r] == class).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &c in &self.classes {
            counts[c] += 1;
        }
        counts
    }

    /// Concatenation; class/group counts take the maximum of both sides.
    pub fn concat(&self, other: &LabeledSet) -> Result<LabeledSet> {
        let points = Matrix::vcat(&[&self.points, &other.points])?;
        let mut classes = self.classes.clone();
        classes.extend_from_slice(&other.classes);
        let groups = match (&self.groups, &other.groups) {
            (Some(a), Some(b)) => Some(a.iter().chain(b).copied().collect()),
            _ => None,
        };
        LabeledSet::new(
            points,
            classes,
            groups,
            self.num_classes.max(other.num_classes),
            self.num_groups.max(other.num_groups),
        )
    }
}

/// Per-class mode centers, `classes * modes` rows.
pub fn mode_centers(spec: &DatasetSpec) -> Result<Matrix> {
    spec.validate()?;
    if !spec.centers.is_empty() {
        return Matrix::from_rows(&spec.centers);
    }
    let mut rng = RngStream::with_stream(spec.seed, GEOMETRY_STREAM);
    let (c_n, m_n, d, s) = (spec.classes, spec.modes, spec.dim, spec.center_scale);
    let mut centers = Matrix::zeros(c_n * m_n, d);
    match spec.family {
        Family::GaussMixture => {
            let total = c_n * m_n;
            // separation target: the largest spacing a grid of `total` cells allows, capped
            let mut min_sep = (2.0 * s / libm::pow(total as f64, 1.0 / d as f64)) * 0.8;
            min_sep = min_sep.max(6.0 * spec.spread).min(2.0 * s);
            let mut placed = 0;
            let mut attempts = 0;
            while placed < total {
                let cand: Vec<f64> = (0..d).map(|_| (2.0 * rng.uniform() - 1.0) * s).collect();
                let ok = (0..placed).all(|j| dist2(centers.row(j), &cand) >= min_sep * min_sep);
                attempts += 1;
                if ok || attempts > CENTER_ATTEMPTS {
                    centers.row_mut(placed).copy_from_slice(&cand);
                    placed += 1;
                    attempts = 0;
                }
            }
        }
        Family::Rings => {
            for c in 0..c_n {
                let radius = s * (c + 1) as f64 / c_n as f64;
                let phase = rng.uniform() * core::f64::consts::TAU;
                for m in 0..m_n {
                    let angle = phase + core::f64::consts::TAU * m as f64 / m_n as f64;
                    let row = centers.row_mut(c * m_n + m);
                    row[0] = radius * libm::cos(angle);
                    row[1] = radius * libm::sin(angle);
                }
            }
        }
        Family::MoonsPerClass => {
            let radius = s / (c_n as f64).max(2.0);
            for c in 0..c_n {
                let anchor: Vec<f64> = (0..d).map(|_| (2.0 * rng.uniform() - 1.0) * (s - radius)).collect();
                let flip = if c % 2 == 0 { 1.0 } else { -1.0 };
                for m in 0..m_n {
                    let angle = core::f64::consts::PI * (m as f64 + 0.5) / m_n as f64;
                    let row = centers.row_mut(c * m_n + m);
                    row.copy_from_slice(&anchor);
                    row[0] += radius * libm::cos(angle);
                    row[1] += flip * radius * libm::sin(angle);
                }
            }
        }
    }
    Ok(centers)
}

/// Mode-weight order for each class (a permutation of `mode_weights`).
pub fn class_mode_weights(spec: &DatasetSpec) -> Vec<Vec<f64>> {
    let base = if spec.mode_weights.is_empty() { vec![1.0; spec.modes] } else { spec.mode_weights.clone() };
    let mut rng = RngStream::with_stream(spec.seed, GEOMETRY_STREAM).derive(0xface);
    (0..spec.classes)
        .map(|_| {
            let mut w = base.clone();
            rng.shuffle(&mut w);
            let total: f64 = w.iter().sum();
            w.iter().map(|v| v / total).collect()
        })
        .collect()
}

/// Draws `per_class()` points for every class.
///
/// Rows are class-major; within a class, point `i` belongs to group
/// `i % groups` so groups stay balanced.
pub fn generate(spec: &DatasetSpec) -> Result<LabeledSet> {
    let centers = mode_centers(spec)?;
    let weights = class_mode_weights(spec);
    let mut rng = RngStream::with_stream(spec.sample_seed.unwrap_or(spec.seed), DRAW_STREAM);
    let n = spec.classes * spec.per_class();
    let mut points = Matrix::zeros(n, spec.dim);
    let mut classes = Vec::with_capacity(n);
    let mut groups = Vec::with_capacity(n);
    let mut row = 0;
    for (c, w) in weights.iter().enumerate() {
        for i in 0..spec.per_class() {
            let m = categorical(&mut rng, w);
            let g = i % spec.groups;
            let center = centers.row(c * spec.modes + m);
            let out = points.row_mut(row);
            for (k, o) in out.iter_mut().enumerate() {
                let shift = spec.group_shifts.get(g).map_or(0.0, |s| s[k]);
                *o = center[k] + shift + spec.spread * rng.normal();
            }
            classes.push(c);
            groups.push(g);
            row += 1;
        }
    }
    let groups = (spec.groups > 1).then_some(groups);
    LabeledSet::new(points, classes, groups, spec.classes, spec.groups)
}

fn categorical(rng: &mut RngStream, probs: &[f64]) -> usize {
    let u = rng.uniform();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `k` real points per class used to ground guidance or fine-tuning.
#[derive(Clone, Debug, PartialEq)]
pub struct ExemplarSet {
    pub per_class: Vec<Matrix>,
    pub k: usize,
}

impl ExemplarSet {
    pub fn num_classes(&self) -> usize {
        self.per_class.len()
    }

    pub fn class(&self, c: usize) -> &Matrix {
        &self.per_class[c]
    }

    /// The first `k` exemplars of every class (all of them if fewer).
    pub fn truncated(&self, k: usize) -> ExemplarSet {
        let per_class: Vec<Matrix> = self.per_class.iter().map(|m| m.select_rows(&(0..k.min(m.rows())).collect::<Vec<_>>())).collect();
        let k = per_class.iter().map(|m| m.rows()).min().unwrap_or(0);
        ExemplarSet { per_class, k }
    }

    /// Exemplars of the given classes stacked (duplicates ignored, class
    /// order ascending).
    pub fn pooled(&self, classes: &[usize]) -> Matrix {
        let mut cs: Vec<usize> = classes.to_vec();
        cs.sort_unstable();
        cs.dedup();
        let parts: Vec<&Matrix> = cs.iter().filter_map(|&c| self.per_class.get(c)).collect();
        Matrix::vcat(&parts).unwrap_or_else(|_| Matrix::zeros(0, 0))
    }

    pub fn to_labeled(&self) -> LabeledSet {
        let parts: Vec<&Matrix> = self.per_class.iter().collect();
        let points = Matrix::vcat(&parts).unwrap_or_else(|_| Matrix::zeros(0, 0));
        let classes = self.per_class.iter().enumerate().flat_map(|(c, m)| vec![c; m.rows()]).collect();
        LabeledSet { points, classes, groups: None, num_classes: self.per_class.len(), num_groups: 1 }
    }

    pub fn from_labeled(set: &LabeledSet) -> Result<Self> {
        let per_class: Vec<Matrix> = (0..set.num_classes).map(|c| set.points.select_rows(&set.rows_of_class(c))).collect();
        let k = per_class.first().map_or(0, |m| m.rows());
        if per_class.iter().any(|m| m.rows() != k) || k == 0 {
            return Err(Error::contract("exemplar set needs the same non-zero count for every class"));
        }
        Ok(Self { per_class, k })
    }
}

#[derive(Clone, Debug)]
pub struct Split {
    pub train: LabeledSet,
    pub validation: LabeledSet,
    pub exemplars: ExemplarSet,
    pub train_rows: Vec<usize>,
    pub validation_rows: Vec<usize>,
    /// Row indices (into the input set) of the exemplars, per class.
    pub exemplar_rows: Vec<Vec<usize>>,
}

fn content_order(points: &Matrix, a: usize, b: usize) -> Ordering {
    points
        .row(a)
        .iter()
        .zip(points.row(b))
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Splits each class into validation and train parts and draws `k`
/// exemplars from the train part without replacement.
///
/// Exemplars keep their draw order, so the set for `k` is a prefix of the
/// set for any larger `k` at the same seed.
///
/// Rows of a class are first put in a content-defined order, so the
/// selected points depend on the seed and the point values but not on the
/// storage order of the input.
pub fn split(set: &LabeledSet, val_per_class: usize, k: usize, seed: u64) -> Result<Split> {
    if k == 0 {
        return Err(Error::contract("exemplar count k must be >= 1"));
    }
    let mut train_rows = Vec::new();
    let mut validation_rows = Vec::new();
    let mut exemplar_rows = Vec::with_capacity(set.num_classes);
    for c in 0..set.num_classes {
        let mut rows = set.rows_of_class(c);
        let required = val_per_class + k;
        if rows.len() < required {
            return Err(Error::Split { class: c, available: rows.len(), required });
        }
        rows.sort_by(|&a, &b| content_order(&set.points, a, b).then(a.cmp(&b)));
        let mut rng = RngStream::with_stream(seed, c as u64).derive(0x5eed);
        rng.shuffle(&mut rows);
        let (val, train) = rows.split_at(val_per_class);
        validation_rows.extend_from_slice(val);
        train_rows.extend_from_slice(train);
        exemplar_rows.push(train[..k].to_vec());
    }
    train_rows.sort_unstable();
    validation_rows.sort_unstable();
    let exemplars = ExemplarSet {
        per_class: exemplar_rows.iter().map(|rows| set.points.select_rows(rows)).collect(),
        k,
    };
    Ok(Split {
        train: set.subset(&train_rows),
        validation: set.subset(&validation_rows),
        exemplars,
        train_rows,
        validation_rows,
        exemplar_rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_class_spec() -> DatasetSpec {
        DatasetSpec {
            classes: 2,
            modes: 1,
            spread: 0.3,
            centers: vec![vec![5.0, 0.0], vec![-5.0, 0.0]],
            train_per_class: 500,
            val_per_class: 500,
            seed: 4,
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn degenerate_mixture_collapses_to_center() {
        let spec = DatasetSpec {
            classes: 1,
            modes: 1,
            spread: 1e-12,
            centers: vec![vec![0.0, 0.0]],
            train_per_class: 50,
            val_per_class: 10,
            ..DatasetSpec::default()
        };
        let set = generate(&spec).unwrap();
        assert!(set.points.max_abs() < 1e-10);
    }

    #[test]
    fn class_means_near_centers() {
        let set = generate(&two_class_spec()).unwrap();
        for (c, cx) in [(0usize, 5.0), (1, -5.0)] {
            let rows = set.rows_of_class(c);
            let mean = set.points.select_rows(&rows).mean_rows();
            assert!((mean[(0, 0)] - cx).abs() < 0.1);
            assert!(mean[(0, 1)].abs() < 0.1);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&DatasetSpec { train_per_class: 20, val_per_class: 5, ..DatasetSpec::default() }).unwrap();
        let b = generate(&DatasetSpec { train_per_class: 20, val_per_class: 5, ..DatasetSpec::default() }).unwrap();
        assert_eq!(a.points.checksum(), b.points.checksum());
    }

    #[test]
    fn spec_errors() {
        assert!(generate(&DatasetSpec { modes: 0, ..DatasetSpec::default() }).is_err());
        assert!(generate(&DatasetSpec { spread: 0.0, ..DatasetSpec::default() }).is_err());
        assert!(generate(&DatasetSpec { spread: -1.0, ..DatasetSpec::default() }).is_err());
        assert!(generate(&DatasetSpec { dim: 1, ..DatasetSpec::default() }).is_err());
    }

    #[test]
    fn split_counts_and_boundaries() {
        let spec = DatasetSpec { classes: 3, train_per_class: 10, val_per_class: 5, ..DatasetSpec::default() };
        let set = generate(&spec).unwrap();
        let s = split(&set, 5, 2, 1).unwrap();
        assert_eq!(s.exemplars.to_labeled().len(), 6);
        assert_eq!(s.train.len(), 30);
        assert_eq!(s.validation.len(), 15);

        let all = split(&set, 5, 10, 1).unwrap();
        for c in 0..3 {
            let mut ex = all.exemplar_rows[c].clone();
            ex.sort_unstable();
            let train_c: Vec<usize> = all.train_rows.iter().copied().filter(|&r| set.classes[r] == c).collect();
            assert_eq!(ex, train_c);
        }
    }

    #[test]
    fn exemplars_nest_in_k() {
        let spec = DatasetSpec { classes: 2, train_per_class: 20, val_per_class: 5, ..DatasetSpec::default() };
        let set = generate(&spec).unwrap();
        let small = split(&set, 5, 3, 4).unwrap();
        let big = split(&set, 5, 12, 4).unwrap();
        assert_eq!(small.validation, big.validation);
        assert_eq!(big.exemplars.truncated(3), small.exemplars);
    }

    #[test]
    fn insufficient_points_names_class() {
        let spec = DatasetSpec { classes: 2, train_per_class: 3, val_per_class: 2, ..DatasetSpec::default() };
        let set = generate(&spec).unwrap();
        match split(&set, 2, 4, 0) {
            Err(Error::Split { class: 0, available: 5, required: 6 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rings_and_moons_generate() {
        for family in [Family::Rings, Family::MoonsPerClass] {
            let spec = DatasetSpec { family, dim: 3, train_per_class: 5, val_per_class: 5, ..DatasetSpec::default() };
            let set = generate(&spec).unwrap();
            assert_eq!(set.len(), 8 * 10);
            assert!(set.points.all_finite());
        }
    }

    #[test]
    fn skewed_weights_skew_modes() {
        let spec = DatasetSpec {
            classes: 1,
            modes: 2,
            mode_weights: vec![9.0, 1.0],
            centers: vec![vec![-3.0, 0.0], vec![3.0, 0.0]],
            train_per_class: 2000,
            val_per_class: 1,
            ..DatasetSpec::default()
        };
        let set = generate(&spec).unwrap();
        let left = set.points.iter_rows().filter(|r| r[0] < 0.0).count() as f64 / set.len() as f64;
        assert!(!(0.15..=0.85).contains(&left), "left fraction {left}");
    }
}
