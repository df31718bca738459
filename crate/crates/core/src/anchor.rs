//! Anchor scene representation and second-order anchor statistics.
//!
//! Every anchor feature `f^a` is one observation of `D` variables. The global
//! channel covariance is standardized into a correlation matrix whose leading
//! eigenvectors (the principal co-variations `P`) are shared by all anchors.
//! Each anchor then extracts `M` texture vectors `F_i([P_i, f^a])`.
//!
//! The basis is a stop-gradient boundary: `μ`, `Σ`, `R` and `P` are constants
//! for backpropagation.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::mlp::{MlpParams, MlpRecord};
use crate::numerics::{sym_eigendecomposition, EigenPairs, SymMatrix};

/// Channels whose standard deviation falls below this are treated as dead.
pub const DEGENERATE_STD: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct Anchor {
    pub position: [f64; 3],
    pub feature: Vec<f64>,
    /// Positive per-axis scaling `l^a`, applied to offsets and Gaussian scales.
    pub scaling: [f64; 3],
    /// `K` offsets `o^a_k`, in units of `scaling`.
    pub offsets: Vec<[f64; 3]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnchorField {
    pub anchors: Vec<Anchor>,
    feature_dim: usize,
    offsets_per_anchor: usize,
}

impl AnchorField {
    pub fn new(anchors: Vec<Anchor>, feature_dim: usize, offsets_per_anchor: usize) -> Result<Self> {
        if anchors.is_empty() {
            return Err(Error::InvalidInput("an anchor field needs at least one anchor".into()));
        }
        if feature_dim == 0 || offsets_per_anchor == 0 {
            return Err(Error::Config("feature_dim and offsets_per_anchor must be >= 1".into()));
        }
        let field = Self {
            anchors,
            feature_dim,
            offsets_per_anchor,
        };
        field.validate()?;
        let mut seen = BTreeSet::new();
        for (i, a) in field.anchors.iter().enumerate() {
            if !seen.insert(a.position.map(f64::to_bits)) {
                return Err(Error::InvalidInput(format!("anchor {i} duplicates a position")));
            }
        }
        Ok(field)
    }

    /// Checks the per-anchor shape and positivity invariants.
    pub fn validate(&self) -> Result<()> {
        for (i, a) in self.anchors.iter().enumerate() {
            if a.feature.len() != self.feature_dim {
                return Err(Error::InvalidInput(format!(
                    "anchor {i} has feature length {} (expected {})",
                    a.feature.len(),
                    self.feature_dim
                )));
            }
            if a.offsets.len() != self.offsets_per_anchor {
                return Err(Error::InvalidInput(format!(
                    "anchor {i} has {} offsets (expected {})",
                    a.offsets.len(),
                    self.offsets_per_anchor
                )));
            }
            if a.scaling.iter().any(|&s| !(s > 0.0)) {
                return Err(Error::InvalidInput(format!("anchor {i} has non-positive scaling")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn offsets_per_anchor(&self) -> usize {
        self.offsets_per_anchor
    }
}

/// One anchor at the center of every occupied voxel of the origin-aligned grid.
///
/// Anchors come out sorted by voxel index `(ix, iy, iz)` with zero features,
/// zero offsets and scaling equal to `voxel_size`.
pub fn voxelize_points(
    points: &[[f64; 3]],
    voxel_size: f64,
    feature_dim: usize,
    offsets_per_anchor: usize,
) -> Result<AnchorField> {
    if points.is_empty() {
        return Err(Error::InvalidInput("cannot voxelize an empty point list".into()));
    }
    if !(voxel_size > 0.0) || !voxel_size.is_finite() {
        return Err(Error::InvalidInput(format!("voxel size must be positive, got {voxel_size}")));
    }
    let mut voxels = BTreeSet::new();
    for (i, p) in points.iter().enumerate() {
        if p.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput(format!("point {i} is not finite")));
        }
        voxels.insert(p.map(|x| (x / voxel_size).floor() as i64));
    }
    let anchors = voxels
        .into_iter()
        .map(|v| Anchor {
            position: v.map(|i| (i as f64 + 0.5) * voxel_size),
            feature: vec![0.0; feature_dim],
            scaling: [voxel_size; 3],
            offsets: vec![[0.0; 3]; offsets_per_anchor],
        })
        .collect();
    AnchorField::new(anchors, feature_dim, offsets_per_anchor)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStatistics {
    pub mean: Vec<f64>,
    pub covariance: SymMatrix,
    /// Set when `N = 1`: the `N − 1` denominator is undefined and the
    /// covariance is reported as zero.
    pub degenerate: bool,
}

/// Channel mean and unbiased `D x D` channel covariance over all anchors.
pub fn compute_feature_covariance(field: &AnchorField) -> FeatureStatistics {
    let n = field.len();
    let d = field.feature_dim();
    let mut mean = vec![0.0; d];
    for a in &field.anchors {
        for (m, f) in mean.iter_mut().zip(&a.feature) {
            *m += f;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    if n < 2 {
        return FeatureStatistics {
            mean,
            covariance: SymMatrix::zeros(d),
            degenerate: true,
        };
    }

    let mut acc = vec![0.0; d * d];
    let mut centered = vec![0.0; d];
    for a in &field.anchors {
        for u in 0..d {
            centered[u] = a.feature[u] - mean[u];
        }
        for u in 0..d {
            for v in u..d {
                acc[u * d + v] += centered[u] * centered[v];
            }
        }
    }
    let scale = 1.0 / (n as f64 - 1.0);
    let covariance = SymMatrix::from_upper(d, |u, v| acc[u * d + v] * scale);
    FeatureStatistics {
        mean,
        covariance,
        degenerate: false,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Correlation {
    pub matrix: SymMatrix,
    pub std_devs: Vec<f64>,
    /// Channels with `σ < DEGENERATE_STD`: zero off-diagonal, unit diagonal.
    pub degenerate_channels: Vec<bool>,
}

/// `R = A⁻¹ Σ A⁻¹` with `A = diag(√Σ_uu)` and guarded dead channels.
pub fn covariance_to_correlation(covariance: &SymMatrix) -> Result<Correlation> {
    let d = covariance.dim();
    let diag = covariance.diagonal();
    if let Some(u) = diag.iter().position(|&x| x < 0.0 || !x.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "covariance diagonal entry {u} is {} (not a covariance)",
            diag[u]
        )));
    }
    let std_devs: Vec<f64> = diag.iter().map(|x| x.sqrt()).collect();
    let degenerate_channels: Vec<bool> = std_devs.iter().map(|&s| s < DEGENERATE_STD).collect();
    let matrix = SymMatrix::from_upper(d, |u, v| {
        if u == v {
            1.0
        } else if degenerate_channels[u] || degenerate_channels[v] {
            0.0
        } else {
            covariance.get(u, v) / (std_devs[u] * std_devs[v])
        }
    });
    Ok(Correlation {
        matrix,
        std_devs,
        degenerate_channels,
    })
}

/// Eigendecomposition of `R` and its top-`m` eigenvectors as columns.
pub fn principal_covariations(correlation: &SymMatrix, m: usize) -> Result<(EigenPairs, Vec<Vec<f64>>)> {
    if m == 0 || m > correlation.dim() {
        return Err(Error::Config(format!(
            "cannot select {m} principal co-variations from a {}-dimensional feature",
            correlation.dim()
        )));
    }
    let eigen = sym_eigendecomposition(correlation)?;
    let principal = (0..m).map(|i| eigen.column(i)).collect();
    Ok((eigen, principal))
}

/// Immutable snapshot of the global second-order statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct SecondOrderBasis {
    /// Training iteration whose anchor features produced the snapshot.
    pub iteration: usize,
    pub mean: Vec<f64>,
    pub covariance: SymMatrix,
    pub correlation: SymMatrix,
    pub std_devs: Vec<f64>,
    pub degenerate_channels: Vec<bool>,
    /// Fewer than two anchors contributed.
    pub sample_degenerate: bool,
    pub eigen: EigenPairs,
    /// `M` columns of length `D`, by descending eigenvalue.
    pub principal: Vec<Vec<f64>>,
}

impl SecondOrderBasis {
    pub fn m(&self) -> usize {
        self.principal.len()
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn is_degenerate(&self) -> bool {
        self.sample_degenerate || self.degenerate_channels.iter().any(|&d| d)
    }

    pub fn active_channels(&self) -> usize {
        self.degenerate_channels.iter().filter(|&&d| !d).count()
    }
}

/// Covariance, correlation and principal co-variations in one snapshot.
pub fn refresh_basis(field: &AnchorField, m: usize, iteration: usize) -> Result<SecondOrderBasis> {
    if m == 0 || m > field.feature_dim() {
        return Err(Error::Config(format!(
            "M = {m} must lie in 1..={}",
            field.feature_dim()
        )));
    }
    let stats = compute_feature_covariance(field);
    let corr = covariance_to_correlation(&stats.covariance)?;
    let (eigen, principal) = principal_covariations(&corr.matrix, m)?;
    Ok(SecondOrderBasis {
        iteration,
        mean: stats.mean,
        covariance: stats.covariance,
        correlation: corr.matrix,
        std_devs: corr.std_devs,
        degenerate_channels: corr.degenerate_channels,
        sample_degenerate: stats.degenerate,
        eigen,
        principal,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedFeatures {
    pub textures: Vec<Vec<f64>>,
}

/// Extractor records for the backward pass.
#[derive(Clone, Debug)]
pub struct AugmentRecord {
    pub(crate) extractors: Vec<MlpRecord>,
}

fn check_extractors(feature: &[f64], basis: &SecondOrderBasis, extractors: &[MlpParams]) -> Result<()> {
    let d = feature.len();
    if basis.dim() != d {
        return Err(Error::Config(format!(
            "basis has dimension {} but the feature has {d}",
            basis.dim()
        )));
    }
    if extractors.len() != basis.m() {
        return Err(Error::Config(format!(
            "{} extractors supplied for M = {}",
            extractors.len(),
            basis.m()
        )));
    }
    for (i, e) in extractors.iter().enumerate() {
        if e.input_len() != 2 * d || e.output_len() != d {
            return Err(Error::Config(format!(
                "extractor {i} maps {} -> {} (expected {} -> {d})",
                e.input_len(),
                e.output_len(),
                2 * d
            )));
        }
    }
    Ok(())
}

fn extractor_input(principal: &[f64], feature: &[f64]) -> Vec<f64> {
    let mut input = Vec::with_capacity(principal.len() + feature.len());
    input.extend_from_slice(principal);
    input.extend_from_slice(feature);
    input
}

/// `f^t_i = F_i([P_i, f^a])` for every principal column.
pub fn augment_anchor(
    feature: &[f64],
    basis: &SecondOrderBasis,
    extractors: &[MlpParams],
) -> Result<AugmentedFeatures> {
    check_extractors(feature, basis, extractors)?;
    let textures = extractors
        .iter()
        .zip(&basis.principal)
        .map(|(e, p)| e.forward(&extractor_input(p, feature)))
        .collect::<Result<Vec<_>>>()?;
    Ok(AugmentedFeatures { textures })
}

pub(crate) fn augment_anchor_recorded(
    feature: &[f64],
    basis: &SecondOrderBasis,
    extractors: &[MlpParams],
) -> Result<(AugmentedFeatures, AugmentRecord)> {
    check_extractors(feature, basis, extractors)?;
    let mut textures = Vec::with_capacity(extractors.len());
    let mut records = Vec::with_capacity(extractors.len());
    for (e, p) in extractors.iter().zip(&basis.principal) {
        let (out, rec) = e.forward_recorded(&extractor_input(p, feature))?;
        textures.push(out);
        records.push(rec);
    }
    Ok((AugmentedFeatures { textures }, AugmentRecord { extractors: records }))
}

/// Backpropagates texture gradients into extractor parameters and returns
/// `dL/df^a`. The principal half of each extractor input is a constant.
pub(crate) fn augment_anchor_backward(
    extractors: &[MlpParams],
    record: &AugmentRecord,
    d_textures: &[Vec<f64>],
    extractor_grads: &mut [MlpParams],
    d_feature: &mut [f64],
) {
    let d = d_feature.len();
    for ((e, rec), (d_tex, grads)) in extractors
        .iter()
        .zip(&record.extractors)
        .zip(d_textures.iter().zip(extractor_grads.iter_mut()))
    {
        let d_input = e.backward(rec, d_tex, grads);
        for (g, di) in d_feature.iter_mut().zip(&d_input[d..]) {
            *g += di;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlp::Activation;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn field_from_rows(rows: &[Vec<f64>]) -> AnchorField {
        let d = rows[0].len();
        let anchors = rows
            .iter()
            .enumerate()
            .map(|(i, r)| Anchor {
                position: [i as f64, 0.0, 0.0],
                feature: r.clone(),
                scaling: [1.0; 3],
                offsets: vec![[0.0; 3]],
            })
            .collect();
        AnchorField::new(anchors, d, 1).unwrap()
    }

    fn random_field(n: usize, d: usize, seed: u64) -> AnchorField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        field_from_rows(&rows)
    }

    #[test]
    fn voxelize_merges_points_in_one_voxel() {
        let f = voxelize_points(&[[0.1, 0.1, 0.1], [0.12, 0.11, 0.09]], 1.0, 4, 2).unwrap();
        assert_eq!(f.len(), 1);
        assert_eq!(f.anchors[0].position, [0.5, 0.5, 0.5]);
        assert_eq!(f.anchors[0].scaling, [1.0; 3]);
        assert_eq!(f.anchors[0].offsets, vec![[0.0; 3]; 2]);
        assert_eq!(f.anchors[0].feature, vec![0.0; 4]);
    }

    #[test]
    fn voxelize_two_voxels_sorted() {
        let f = voxelize_points(&[[1.6, 0.0, 0.0], [0.1, 0.0, 0.0]], 1.0, 2, 1).unwrap();
        let pos: Vec<_> = f.anchors.iter().map(|a| a.position).collect();
        assert_eq!(pos, vec![[0.5, 0.5, 0.5], [1.5, 0.5, 0.5]]);
    }

    #[test]
    fn voxelize_counts_distinct_voxels() {
        let mut rng = ChaCha8Rng::seed_from_u64(1000);
        let points: Vec<[f64; 3]> = (0..1000)
            .map(|_| [rng.gen_range(0.0..4.0), rng.gen_range(0.0..4.0), rng.gen_range(0.0..4.0)])
            .collect();
        // Oracle: quadratic scan for distinct floor(p / 0.5) triples.
        let mut distinct: Vec<[i64; 3]> = Vec::new();
        for p in &points {
            let key = [
                (p[0] / 0.5).floor() as i64,
                (p[1] / 0.5).floor() as i64,
                (p[2] / 0.5).floor() as i64,
            ];
            if !distinct.contains(&key) {
                distinct.push(key);
            }
        }
        let f = voxelize_points(&points, 0.5, 4, 1).unwrap();
        assert_eq!(f.len(), distinct.len());
    }

    #[test]
    fn voxelize_rejects_bad_input() {
        assert!(voxelize_points(&[], 1.0, 2, 1).is_err());
        assert!(voxelize_points(&[[0.0; 3]], 0.0, 2, 1).is_err());
        assert!(voxelize_points(&[[f64::NAN, 0.0, 0.0]], 1.0, 2, 1).is_err());
    }

    #[test]
    fn field_rejects_duplicate_positions_and_bad_shapes() {
        let a = Anchor {
            position: [0.0; 3],
            feature: vec![0.0; 2],
            scaling: [1.0; 3],
            offsets: vec![[0.0; 3]],
        };
        assert!(AnchorField::new(vec![a.clone(), a.clone()], 2, 1).is_err());
        assert!(AnchorField::new(vec![a.clone()], 3, 1).is_err());
        let mut bad = a.clone();
        bad.scaling[1] = 0.0;
        assert!(AnchorField::new(vec![bad], 2, 1).is_err());
        assert!(AnchorField::new(vec![], 2, 1).is_err());
    }

    #[test]
    fn covariance_small_example() {
        let f = field_from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]);
        let s = compute_feature_covariance(&f);
        assert_eq!(s.mean, vec![3.0, 4.0]);
        assert_eq!(s.covariance.entries(), &[4.0, 4.0, 4.0, 4.0]);
        assert!(!s.degenerate);
    }

    #[test]
    fn covariance_two_point_variance() {
        let f = field_from_rows(&[vec![0.0], vec![2.0]]);
        let s = compute_feature_covariance(&f);
        assert_eq!(s.mean, vec![1.0]);
        assert_eq!(s.covariance.entries(), &[2.0]);
    }

    #[test]
    fn covariance_of_identical_rows_is_zero() {
        let f = field_from_rows(&vec![vec![0.3, -1.0, 2.0]; 4]);
        let s = compute_feature_covariance(&f);
        assert!(s.covariance.entries().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn single_anchor_is_flagged_degenerate() {
        let f = field_from_rows(&[vec![0.3, 0.7]]);
        let s = compute_feature_covariance(&f);
        assert!(s.degenerate);
        assert_eq!(s.mean, vec![0.3, 0.7]);
        assert!(s.covariance.entries().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn correlation_examples() {
        let c = covariance_to_correlation(&SymMatrix::new(2, vec![4.0, 4.0, 4.0, 4.0]).unwrap()).unwrap();
        assert_eq!(c.matrix.entries(), &[1.0, 1.0, 1.0, 1.0]);
        assert_eq!(c.std_devs, vec![2.0, 2.0]);

        let c = covariance_to_correlation(&SymMatrix::new(2, vec![4.0, 0.0, 0.0, 9.0]).unwrap()).unwrap();
        assert_eq!(c.matrix, SymMatrix::identity(2));

        let dead = SymMatrix::new(3, vec![0.0, 0.0, 0.0, 0.0, 2.0, 1.0, 0.0, 1.0, 3.0]).unwrap();
        let c = covariance_to_correlation(&dead).unwrap();
        assert_eq!(c.degenerate_channels, vec![true, false, false]);
        assert_eq!(c.matrix.get(0, 0), 1.0);
        assert_eq!(c.matrix.get(0, 1), 0.0);
        assert_eq!(c.matrix.get(0, 2), 0.0);
    }

    #[test]
    fn negative_variance_is_rejected() {
        let bad = SymMatrix::new(2, vec![-1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(covariance_to_correlation(&bad).is_err());
    }

    #[test]
    fn principal_of_identity_is_standard_basis() {
        let (_, p) = principal_covariations(&SymMatrix::identity(4), 2).unwrap();
        assert_eq!(p[0], vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(p[1], vec![0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn principal_of_all_ones() {
        let r = SymMatrix::new(2, vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let (eig, p) = principal_covariations(&r, 1).unwrap();
        assert!((eig.values[0] - 2.0).abs() < 1e-14);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((p[0][0] - h).abs() < 1e-14 && (p[0][1] - h).abs() < 1e-14);
    }

    #[test]
    fn principal_rejects_oversized_m() {
        assert!(matches!(principal_covariations(&SymMatrix::identity(2), 3), Err(Error::Config(_))));
        assert!(principal_covariations(&SymMatrix::identity(2), 0).is_err());
    }

    #[test]
    fn principal_subspace_diagonalizes_random_correlation() {
        let f = random_field(64, 16, 33);
        let corr = covariance_to_correlation(&compute_feature_covariance(&f).covariance).unwrap();
        let (_, p) = principal_covariations(&corr.matrix, 2).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let dot: f64 = p[i].iter().zip(&p[j]).map(|(a, b)| a * b).sum();
                assert!((dot - if i == j { 1.0 } else { 0.0 }).abs() < 1e-8);
                // (PᵀRP)_ij
                let mut prp = 0.0;
                for u in 0..16 {
                    for v in 0..16 {
                        prp += p[i][u] * corr.matrix.get(u, v) * p[j][v];
                    }
                }
                if i != j {
                    assert!(prp.abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn identical_features_fall_back_to_identity() {
        let f = field_from_rows(&vec![vec![0.5, 0.5, 0.5]; 5]);
        let b = refresh_basis(&f, 2, 7).unwrap();
        assert!(b.is_degenerate());
        assert_eq!(b.iteration, 7);
        assert_eq!(b.correlation, SymMatrix::identity(3));
        assert_eq!(b.principal[0], vec![1.0, 0.0, 0.0]);
        assert_eq!(b.principal[1], vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn chained_small_example() {
        let f = field_from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]);
        let b = refresh_basis(&f, 1, 0).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((b.principal[0][0] - h).abs() < 1e-14);
        assert!((b.principal[0][1] - h).abs() < 1e-14);
        assert!((b.eigen.values[0] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn random_basis_satisfies_invariants() {
        let f = random_field(200, 16, 8);
        let b = refresh_basis(&f, 2, 0).unwrap();
        assert_eq!(b.m(), 2);
        for u in 0..16 {
            assert!((b.correlation.get(u, u) - 1.0).abs() < 1e-9);
            for v in 0..16 {
                assert!(b.correlation.get(u, v).abs() <= 1.0 + 1e-9);
            }
        }
        let sum: f64 = b.eigen.values.iter().sum();
        assert!((sum - b.active_channels() as f64).abs() < 1e-6);
        assert!(b.eigen.values.iter().all(|&l| l >= -1e-8));
        assert!(b.eigen.orthonormality_error() < 1e-8);
        assert!(b.eigen.residual(&b.correlation) < 1e-8);
    }

    #[test]
    fn refresh_rejects_oversized_m() {
        let f = random_field(5, 3, 1);
        assert!(refresh_basis(&f, 4, 0).is_err());
    }

    fn extractors(d: usize, m: usize, seed: u64) -> Vec<MlpParams> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..m)
            .map(|_| MlpParams::initialized(&[2 * d, 32, d], &[Activation::Relu, Activation::None], &mut rng))
            .collect()
    }

    #[test]
    fn zero_extractors_give_zero_textures() {
        let f = random_field(10, 4, 2);
        let b = refresh_basis(&f, 2, 0).unwrap();
        let mut ex = extractors(4, 2, 0);
        ex.iter_mut().for_each(MlpParams::fill_zero);
        let aug = augment_anchor(&f.anchors[3].feature, &b, &ex).unwrap();
        assert_eq!(aug.textures, vec![vec![0.0; 4]; 2]);
    }

    #[test]
    fn augmented_shape_for_sixteen_dims() {
        let f = random_field(40, 16, 3);
        let b = refresh_basis(&f, 2, 0).unwrap();
        let ex = extractors(16, 2, 1);
        let aug = augment_anchor(&f.anchors[0].feature, &b, &ex).unwrap();
        assert_eq!(aug.textures.len(), 2);
        assert!(aug.textures.iter().all(|t| t.len() == 16 && t.iter().all(|x| x.is_finite())));
        let again = augment_anchor(&f.anchors[0].feature, &b, &ex).unwrap();
        assert_eq!(aug, again);
    }

    #[test]
    fn augment_rejects_mismatched_extractors() {
        let f = random_field(10, 4, 2);
        let b = refresh_basis(&f, 2, 0).unwrap();
        assert!(augment_anchor(&f.anchors[0].feature, &b, &extractors(4, 1, 0)).is_err());
        assert!(augment_anchor(&f.anchors[0].feature, &b, &extractors(5, 2, 0)).is_err());
    }
}
