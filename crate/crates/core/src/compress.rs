//! Energy-threshold low-rank factorization of encoder projections.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{log_mel_frames, AudioClip, AudioError};
use crate::model::{encode_traced, LinearKind, LinearLayer, ModelBundle, ModelError};
use crate::tensor::{FlopCounter, Matrix};

/// Upper bound on calibration rows kept per layer.
pub const MAX_CALIBRATION_ROWS: usize = 8192;

#[derive(Debug, Error)]
pub enum CompressError {
    #[error("invalid compression policy: {0}")]
    InvalidPolicy(String),
    #[error("singular value spectrum is empty or all zero")]
    ZeroSpectrum,
    #[error("singular values must be non-negative and sorted descending")]
    UnsortedSpectrum,
    #[error("activation-svd needs calibration activations for encoder layer {layer} {kind}")]
    MissingActivations { layer: usize, kind: LinearKind },
    #[error("activation-svd needs calibration activations")]
    NoActivations,
    #[error("layer is already factored")]
    NotDense,
    #[error("calibration needs at least one clip")]
    EmptyCalibration,
    #[error("activations have {got} columns, layer expects {expected}")]
    ActivationShape { got: usize, expected: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Audio(#[from] AudioError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CompressionMode {
    WeightSvd,
    ActivationSvd,
}

impl std::str::FromStr for CompressionMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "weight-svd" => Ok(CompressionMode::WeightSvd),
            "activation-svd" => Ok(CompressionMode::ActivationSvd),
            _ => Err(format!("unknown mode {s:?} (weight-svd | activation-svd)")),
        }
    }
}

impl std::fmt::Display for CompressionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CompressionMode::WeightSvd => "weight-svd",
            CompressionMode::ActivationSvd => "activation-svd",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompressionPolicy {
    pub threshold_theta: f64,
    pub calibration_samples: usize,
    pub mode: CompressionMode,
    pub target_kinds: Vec<LinearKind>,
    pub seed: u64,
}

impl Default for CompressionPolicy {
    fn default() -> Self {
        Self {
            threshold_theta: 0.999,
            calibration_samples: 500,
            mode: CompressionMode::ActivationSvd,
            target_kinds: LinearKind::ALL.to_vec(),
            seed: 0,
        }
    }
}

impl CompressionPolicy {
    pub fn validate(&self) -> Result<(), CompressError> {
        if !(self.threshold_theta > 0.0 && self.threshold_theta <= 1.0) {
            return Err(CompressError::InvalidPolicy(format!(
                "threshold_theta {} outside (0, 1]",
                self.threshold_theta
            )));
        }
        if self.calibration_samples == 0 {
            return Err(CompressError::InvalidPolicy("calibration_samples must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Sampled inputs of each targeted encoder projection, keyed by `(layer, kind)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CalibrationSet {
    layers: BTreeMap<(usize, LinearKind), Matrix>,
    n_clips: usize,
}

impl CalibrationSet {
    pub fn get(&self, layer: usize, kind: LinearKind) -> Option<&Matrix> {
        self.layers.get(&(layer, kind))
    }

    pub fn insert(&mut self, layer: usize, kind: LinearKind, activations: Matrix) {
        self.layers.insert((layer, kind), activations);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(usize, LinearKind), &Matrix)> {
        self.layers.iter()
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Clips that contributed activations.
    pub fn n_clips(&self) -> usize {
        self.n_clips
    }
}

/// Uniform row sample of a stream (Algorithm R).
struct Reservoir {
    cols: usize,
    rows: Vec<f32>,
    seen: u64,
    rng: ChaCha8Rng,
}

impl Reservoir {
    fn new(cols: usize, seed: u64) -> Self {
        Self {
            cols,
            rows: Vec::new(),
            seen: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn offer(&mut self, row: &[f32]) {
        let kept = self.rows.len() / self.cols;
        if kept < MAX_CALIBRATION_ROWS {
            self.rows.extend_from_slice(row);
        } else {
            let j = self.rng.random_range(0..=self.seen) as usize;
            if j < MAX_CALIBRATION_ROWS {
                self.rows[j * self.cols..(j + 1) * self.cols].copy_from_slice(row);
            }
        }
        self.seen += 1;
    }

    fn into_matrix(self) -> Matrix {
        Matrix::from_vec(self.rows.len() / self.cols, self.cols, self.rows)
    }
}

fn kind_index(kind: LinearKind) -> u64 {
    LinearKind::ALL.iter().position(|&k| k == kind).unwrap() as u64
}

/// Runs the encoder over up to `calibration_samples` clips and records the
/// input of every targeted projection.
pub fn collect_calibration(
    bundle: &ModelBundle,
    clips: &[AudioClip],
    policy: &CompressionPolicy,
) -> Result<CalibrationSet, CompressError> {
    policy.validate()?;
    if clips.is_empty() {
        return Err(CompressError::EmptyCalibration);
    }
    let mut reservoirs: BTreeMap<(usize, LinearKind), Reservoir> = BTreeMap::new();
    for (i, layer) in bundle.encoder_layers.iter().enumerate() {
        for &kind in &policy.target_kinds {
            let seed = policy.seed ^ ((i as u64) << 8 | kind_index(kind)).wrapping_mul(0x9e37_79b9_7f4a_7c15);
            reservoirs.insert((i, kind), Reservoir::new(layer.linear(kind).d_in(), seed));
        }
    }
    let used = clips.len().min(policy.calibration_samples);
    for clip in &clips[..used] {
        let mel = log_mel_frames(clip, bundle.config.n_frames())?;
        encode_traced(bundle, &mel, &mut FlopCounter::new(), &mut |layer, kind, x| {
            if let Some(r) = reservoirs.get_mut(&(layer, kind)) {
                for row in 0..x.rows() {
                    r.offer(x.row(row));
                }
            }
        })?;
    }
    let mut set = CalibrationSet {
        layers: BTreeMap::new(),
        n_clips: used,
    };
    for (key, r) in reservoirs {
        let m = r.into_matrix();
        if m.rows() < m.cols() {
            log::warn!(
                "encoder layer {} {}: {} calibration rows for {} input dims",
                key.0,
                key.1,
                m.rows(),
                m.cols()
            );
        }
        set.layers.insert(key, m);
    }
    Ok(set)
}

/// Smallest `k` whose leading squared values hold at least `theta` of the energy.
pub fn select_rank(singular_values: &[f64], theta: f64) -> Result<usize, CompressError> {
    if !(theta > 0.0 && theta <= 1.0) {
        return Err(CompressError::InvalidPolicy(format!("theta {theta} outside (0, 1]")));
    }
    if singular_values.iter().any(|&s| !(s >= 0.0))
        || singular_values.windows(2).any(|w| w[1] > w[0])
    {
        return Err(CompressError::UnsortedSpectrum);
    }
    let energy: Vec<f64> = singular_values.iter().map(|s| s * s).collect();
    let total: f64 = energy.iter().sum();
    if total <= 0.0 {
        return Err(CompressError::ZeroSpectrum);
    }
    // Compare the discarded tail rather than the running sum, so θ = 1
    // keeps every nonzero value even when it is far below the leading ones.
    let allowed = (1.0 - theta) * total;
    let mut tail = 0.0;
    let mut k = energy.len();
    for i in (0..energy.len()).rev() {
        tail += energy[i];
        if tail > allowed {
            break;
        }
        k = i;
    }
    Ok(k.max(1))
}

fn energy_fraction(singular_values: &[f64], k: usize) -> f64 {
    let total: f64 = singular_values.iter().map(|s| s * s).sum();
    let tail: f64 = singular_values[k..].iter().map(|s| s * s).sum();
    1.0 - tail / total
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerOutcome {
    pub d_in: usize,
    pub d_out: usize,
    pub selected_rank: usize,
    pub original_params: usize,
    pub new_params: usize,
    pub substituted: bool,
    pub energy_captured: f64,
}

/// Factored layers are smaller only below `d_in·d_out / (d_in + d_out)`.
pub fn substitution_pays(d_in: usize, d_out: usize, k: usize) -> bool {
    k * (d_in + d_out) + d_out < d_in * d_out + d_out
}

/// Descending singular values with the matching left and right vectors.
fn sorted_svd(w: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>, DMatrix<f64>) {
    let svd = w.clone().svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let s = order.iter().map(|&i| svd.singular_values[i]).collect();
    let u = DMatrix::from_fn(u.nrows(), order.len(), |r, c| u[(r, order[c])]);
    let vt = DMatrix::from_fn(order.len(), vt.ncols(), |r, c| vt[(order[r], c)]);
    (s, u, vt)
}

/// Top eigenvectors of `W·(XᵀX)·Wᵀ`, i.e. the left singular basis of `Y = X·Wᵀ`.
fn output_basis(w: &DMatrix<f64>, x: &Matrix) -> (Vec<f64>, DMatrix<f64>) {
    let xm = x.to_nalgebra();
    let cov = xm.transpose() * &xm;
    let gram = w * cov * w.transpose();
    let gram = (&gram + gram.transpose()) * 0.5;
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let s = order.iter().map(|&i| eig.eigenvalues[i].max(0.0).sqrt()).collect();
    let u = DMatrix::from_fn(w.nrows(), order.len(), |r, c| eig.eigenvectors[(r, order[c])]);
    (s, u)
}

/// Values below single-precision resolution relative to the largest are
/// rounding noise of f32 weights and count as zero for rank selection.
fn numerical_spectrum(s: &[f64], max_dim: usize) -> Vec<f64> {
    let tol = s.first().copied().unwrap_or(0.0) * max_dim as f64 * f64::from(f32::EPSILON);
    s.iter().map(|&v| if v > tol { v } else { 0.0 }).collect()
}

pub fn compress_layer(
    layer: &LinearLayer,
    activations: Option<&Matrix>,
    policy: &CompressionPolicy,
) -> Result<(LinearLayer, LayerOutcome), CompressError> {
    policy.validate()?;
    let LinearLayer::Dense { w, b } = layer else {
        return Err(CompressError::NotDense);
    };
    let (d_out, d_in) = w.shape();
    let wm = w.to_nalgebra();
    let (sigma, a, bf) = match policy.mode {
        CompressionMode::WeightSvd => {
            let (s, u, vt) = sorted_svd(&wm);
            let k = select_rank(&numerical_spectrum(&s, d_in.max(d_out)), policy.threshold_theta)?;
            let a = Matrix::from_fn(d_out, k, |r, c| (u[(r, c)] * s[c]) as f32);
            let bf = Matrix::from_fn(k, d_in, |r, c| vt[(r, c)] as f32);
            (s, a, bf)
        }
        CompressionMode::ActivationSvd => {
            let x = activations.ok_or(CompressError::NoActivations)?;
            if x.cols() != d_in {
                return Err(CompressError::ActivationShape {
                    got: x.cols(),
                    expected: d_in,
                });
            }
            let (s, u) = output_basis(&wm, x);
            let k = select_rank(&numerical_spectrum(&s, d_in.max(d_out)), policy.threshold_theta)?;
            let uk = u.columns(0, k).into_owned();
            let bf = uk.transpose() * &wm;
            (s, Matrix::from_nalgebra(&uk), Matrix::from_nalgebra(&bf))
        }
    };
    let k = a.cols();
    let original_params = layer.param_count();
    let substituted = substitution_pays(d_in, d_out, k);
    let new_layer = if substituted {
        LinearLayer::factored(a, bf, b.clone())?
    } else {
        layer.clone()
    };
    let outcome = LayerOutcome {
        d_in,
        d_out,
        selected_rank: k,
        original_params,
        new_params: new_layer.param_count(),
        substituted,
        energy_captured: energy_fraction(&sigma, k),
    };
    Ok((new_layer, outcome))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerReport {
    pub layer_id: usize,
    pub kind: LinearKind,
    #[serde(flatten)]
    pub outcome: LayerOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompressionTotals {
    /// Encoder parameters; the decoder is never modified.
    pub params_before: usize,
    pub params_after: usize,
    pub params_saved: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompressionReport {
    pub schema_version: u32,
    pub mode: CompressionMode,
    pub threshold_theta: f64,
    pub calibration_samples: usize,
    pub calibration_clips_used: usize,
    pub notes: Vec<String>,
    pub layers: Vec<LayerReport>,
    pub totals: CompressionTotals,
}

impl CompressionReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<6} {:<9} {:>6} {:>6} {:>5} {:>9} {:>9} {:>5} {:>9}",
            "layer", "kind", "d_in", "d_out", "k", "params", "new", "subst", "energy"
        );
        for l in &self.layers {
            let o = &l.outcome;
            let _ = writeln!(
                s,
                "{:<6} {:<9} {:>6} {:>6} {:>5} {:>9} {:>9} {:>5} {:>9.6}",
                l.layer_id,
                l.kind.as_str(),
                o.d_in,
                o.d_out,
                o.selected_rank,
                o.original_params,
                o.new_params,
                if o.substituted { "yes" } else { "no" },
                o.energy_captured
            );
        }
        let t = &self.totals;
        let _ = writeln!(
            s,
            "encoder params: {} -> {} (saved {})",
            t.params_before, t.params_after, t.params_saved
        );
        s
    }
}

/// Compresses every encoder projection of a targeted kind. Layers are
/// processed in parallel; the report is in `(layer, kind)` order.
pub fn compress_bundle(
    bundle: &ModelBundle,
    calib: Option<&CalibrationSet>,
    policy: &CompressionPolicy,
) -> Result<(ModelBundle, CompressionReport), CompressError> {
    policy.validate()?;
    let mut kinds = policy.target_kinds.clone();
    kinds.sort();
    kinds.dedup();
    let jobs: Vec<(usize, LinearKind)> = (0..bundle.encoder_layers.len())
        .flat_map(|i| kinds.iter().map(move |&k| (i, k)))
        .collect();
    if policy.mode == CompressionMode::ActivationSvd {
        for &(layer, kind) in &jobs {
            if calib.and_then(|c| c.get(layer, kind)).is_none() {
                return Err(CompressError::MissingActivations { layer, kind });
            }
        }
    }
    let results: Vec<(LinearLayer, LayerOutcome)> = jobs
        .par_iter()
        .map(|&(layer, kind)| {
            let acts = calib.and_then(|c| c.get(layer, kind));
            compress_layer(bundle.encoder_layers[layer].linear(kind), acts, policy)
        })
        .collect::<Result<_, _>>()?;

    let mut out = bundle.clone();
    let mut layers = Vec::with_capacity(jobs.len());
    for (&(layer_id, kind), (new_layer, outcome)) in jobs.iter().zip(results) {
        *out.encoder_layers[layer_id].linear_mut(kind) = new_layer;
        layers.push(LayerReport {
            layer_id,
            kind,
            outcome,
        });
    }
    out.validate()?;
    let params_before = bundle.param_count().encoder;
    let params_after = out.param_count().encoder;
    let report = CompressionReport {
        schema_version: 1,
        mode: policy.mode,
        threshold_theta: policy.threshold_theta,
        calibration_samples: policy.calibration_samples,
        calibration_clips_used: calib.map_or(0, CalibrationSet::n_clips),
        notes: vec![
            "each projection (Q, K, V, out, fc1, fc2) is factored independently".into(),
            "biases, convolutions, embeddings and decoder layers are not compressed".into(),
            "a layer is replaced only if k*(d_in+d_out)+d_out < d_in*d_out+d_out".into(),
        ],
        layers,
        totals: CompressionTotals {
            params_before,
            params_after,
            params_saved: params_before - params_after,
        },
    };
    Ok((out, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{container, encode, ModelConfig};
    use crate::model::random_orthonormal;
    use proptest::prelude::*;
    use rand_distr::{Distribution, Normal};

    fn weight_policy(theta: f64) -> CompressionPolicy {
        CompressionPolicy {
            threshold_theta: theta,
            mode: CompressionMode::WeightSvd,
            ..CompressionPolicy::default()
        }
    }

    #[test]
    fn select_rank_examples() {
        assert_eq!(select_rank(&[3.0, 1.0, 0.1], 0.999).unwrap(), 2);
        // oracle: direct cumulative ratios 9/10.01 and 10/10.01
        assert!(9.0 / 10.01 < 0.999 && 10.0 / 10.01 >= 0.999);
        assert_eq!(select_rank(&[5.0], 0.5).unwrap(), 1);
        assert_eq!(select_rank(&[4.0, 2.0, 1e-30, 0.0, 0.0], 1.0).unwrap(), 3);
        assert!(matches!(select_rank(&[0.0, 0.0], 0.9), Err(CompressError::ZeroSpectrum)));
        assert!(matches!(select_rank(&[], 0.9), Err(CompressError::ZeroSpectrum)));
        assert!(select_rank(&[1.0, 2.0], 0.9).is_err());
        assert!(select_rank(&[1.0], 0.0).is_err());
    }

    #[test]
    fn identity_keeps_full_rank_and_is_left_dense() {
        let layer = LinearLayer::dense(Matrix::identity(384), vec![0.0; 384]).unwrap();
        let (out, o) = compress_layer(&layer, None, &weight_policy(0.999)).unwrap();
        // Flat spectrum: every dropped value costs 1/384 > 0.001 of the energy.
        assert_eq!(o.selected_rank, 384);
        assert!(o.selected_rank >= 192 && !o.substituted);
        assert_eq!(out, layer);
        assert_eq!(o.new_params, o.original_params);
    }

    #[test]
    fn rank_one_outer_product() {
        let u: Vec<f32> = (0..48).map(|i| (i as f32 * 0.37).sin()).collect();
        let v: Vec<f32> = (0..32).map(|i| (i as f32 * 0.11).cos()).collect();
        let w = Matrix::from_fn(48, 32, |r, c| u[r] * v[c]);
        let layer = LinearLayer::dense(w, vec![0.1; 48]).unwrap();
        for theta in [0.5, 0.999, 1.0] {
            let (out, o) = compress_layer(&layer, None, &weight_policy(theta)).unwrap();
            assert_eq!(o.selected_rank, 1, "theta {theta}");
            assert!(o.substituted);
            let x = Matrix::from_fn(7, 32, |r, c| ((r * 3 + c) % 11) as f32 / 5.5 - 1.0);
            let diff = out.apply(&x).unwrap().max_abs_diff(&layer.apply(&x).unwrap());
            assert!(diff <= 1e-5, "{diff}");
        }
    }

    #[test]
    fn geometric_spectrum() {
        let n = 384;
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let u = random_orthonormal(n, n, &mut rng).to_nalgebra();
        let v = random_orthonormal(n, n, &mut rng).to_nalgebra();
        let s = DMatrix::from_fn(n, n, |r, c| if r == c { 0.5f64.powi(r as i32) } else { 0.0 });
        let w = Matrix::from_nalgebra(&(&u * s * v.transpose()));
        let layer = LinearLayer::dense(w.clone(), vec![0.0; n]).unwrap();
        let (out, o) = compress_layer(&layer, None, &weight_policy(0.999)).unwrap();
        assert_eq!(o.selected_rank, 5);
        assert!(o.substituted);

        // Geometric series: captured = (1 - 0.25^5) / (1 - 0.25^384).
        let captured = (1.0 - 0.25f64.powi(5)) / (1.0 - 0.25f64.powi(n as i32));
        assert!((o.energy_captured - captured).abs() < 1e-9);
        let wd = w.to_nalgebra();
        let rel = (&wd - out.effective_weight().to_nalgebra()).norm() / wd.norm();
        assert!((rel - (1.0 - captured).sqrt()).abs() < 1e-6, "{rel}");
    }

    #[test]
    fn activation_svd_reconstructs_outputs_on_calibration_span() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let dist = Normal::new(0.0f32, 1.0).unwrap();
        let w = Matrix::from_fn(24, 16, |_, _| dist.sample(&mut rng));
        // Inputs confined to a 3-dimensional subspace.
        let basis = random_orthonormal(16, 3, &mut rng);
        let coef = Matrix::from_fn(200, 3, |_, _| dist.sample(&mut rng));
        let x = coef.matmul(&basis.transpose());
        let layer = LinearLayer::dense(w, vec![0.5; 24]).unwrap();
        let policy = CompressionPolicy {
            threshold_theta: 0.999_999,
            ..CompressionPolicy::default()
        };
        let (out, o) = compress_layer(&layer, Some(&x), &policy).unwrap();
        assert_eq!(o.selected_rank, 3);
        assert!(o.substituted);
        let diff = out.apply(&x).unwrap().max_abs_diff(&layer.apply(&x).unwrap());
        assert!(diff < 1e-3, "{diff}");
        assert!(matches!(
            compress_layer(&layer, None, &policy),
            Err(CompressError::NoActivations)
        ));
        assert!(matches!(
            compress_layer(&layer, Some(&Matrix::zeros(4, 5)), &policy),
            Err(CompressError::ActivationShape { .. })
        ));
    }

    fn toy() -> ModelBundle {
        ModelBundle::random(ModelConfig::toy(2, 64, 4), 8).unwrap()
    }

    fn tone_clips(n: usize) -> Vec<AudioClip> {
        (0..n)
            .map(|i| {
                let f = 300.0 + 120.0 * i as f32;
                AudioClip::from_samples_16k(
                    (0..4000).map(|t| 0.3 * (t as f32 * f * std::f32::consts::TAU / 16_000.0).sin()).collect(),
                )
            })
            .collect()
    }

    #[test]
    fn calibration_rows_and_determinism() {
        let b = toy();
        let policy = CompressionPolicy::default();
        let one = collect_calibration(&b, &tone_clips(1), &policy).unwrap();
        assert_eq!(one.len(), 2 * 6);
        for (_, m) in one.iter() {
            assert_eq!(m.rows(), b.config.n_audio_ctx);
        }
        let clips = tone_clips(3);
        let a = collect_calibration(&b, &clips, &policy).unwrap();
        let again = collect_calibration(&b, &clips, &policy).unwrap();
        assert_eq!(a, again);
        assert_eq!(a.n_clips(), 3);
        let capped = CompressionPolicy {
            calibration_samples: 2,
            ..policy.clone()
        };
        assert_eq!(collect_calibration(&b, &clips, &capped).unwrap().n_clips(), 2);
        assert!(matches!(collect_calibration(&b, &[], &policy), Err(CompressError::EmptyCalibration)));
    }

    #[test]
    fn duplicate_clips_add_no_rank() {
        let b = toy();
        let policy = CompressionPolicy::default();
        let clip = tone_clips(1);
        let single = collect_calibration(&b, &clip, &policy).unwrap();
        let many = collect_calibration(&b, &vec![clip[0].clone(); 40], &policy).unwrap();
        let rank = |m: &Matrix| m.to_nalgebra().rank(1e-6);
        for ((key, m1), (_, m2)) in single.iter().zip(many.iter()) {
            assert!(rank(m2) <= rank(m1), "{key:?}");
        }
    }

    #[test]
    fn reservoir_caps_rows() {
        let mut r = Reservoir::new(2, 1);
        for i in 0..(MAX_CALIBRATION_ROWS + 500) {
            r.offer(&[i as f32, 0.0]);
        }
        let m = r.into_matrix();
        assert_eq!(m.rows(), MAX_CALIBRATION_ROWS);
        assert!((0..m.rows()).any(|i| m.get(i, 0) as usize >= MAX_CALIBRATION_ROWS));
    }

    #[test]
    fn theta_one_on_generic_weights_is_noop() {
        let b = toy();
        let (out, report) = compress_bundle(&b, None, &weight_policy(1.0)).unwrap();
        assert_eq!(out, b);
        assert_eq!(report.totals.params_saved, 0);
        assert_eq!(report.layers.len(), 12);
        assert!(report.layers.iter().all(|l| !l.outcome.substituted));
    }

    #[test]
    fn constructed_rank_two_fc1_is_the_only_substitution() {
        let mut b = toy();
        b.make_encoder_low_rank(LinearKind::MlpFc1, 2, 17);
        let (out, report) = compress_bundle(&b, None, &weight_policy(0.999)).unwrap();
        for l in &report.layers {
            if l.kind == LinearKind::MlpFc1 {
                assert_eq!((l.outcome.selected_rank, l.outcome.substituted), (2, true));
            } else {
                assert!(!l.outcome.substituted, "{:?}", l);
            }
        }
        assert_eq!(
            report.totals.params_saved,
            b.param_count().total - out.param_count().total
        );
        assert_eq!(out.decoder_layers, b.decoder_layers);

        let bytes = container::to_bytes(&out);
        let loaded = container::from_bytes(&bytes).unwrap();
        let mel = crate::audio::log_mel_frames(&tone_clips(1)[0], b.config.n_frames()).unwrap();
        assert_eq!(encode(&loaded, &mel).unwrap(), encode(&out, &mel).unwrap());
        let dense = encode(&b, &mel).unwrap();
        assert!(encode(&out, &mel).unwrap().max_abs_diff(&dense) < 1e-3);
    }

    #[test]
    fn report_order_and_json_keys() {
        let b = toy();
        let calib = collect_calibration(&b, &tone_clips(2), &CompressionPolicy::default()).unwrap();
        let (_, report) = compress_bundle(&b, Some(&calib), &CompressionPolicy::default()).unwrap();
        let ids: Vec<(usize, LinearKind)> = report.layers.iter().map(|l| (l.layer_id, l.kind)).collect();
        let mut sorted = ids.clone();
        sorted.sort();
        assert_eq!(ids, sorted);
        let json: serde_json::Value = serde_json::from_str(&report.to_json()).unwrap();
        assert_eq!(json["schema_version"], 1);
        assert_eq!(json["mode"], "activation-svd");
        assert!(json["layers"][0]["selected_rank"].is_u64());
        assert!(report.to_table().contains("encoder params"));
        let missing = compress_bundle(&b, None, &CompressionPolicy::default());
        assert!(matches!(missing, Err(CompressError::MissingActivations { layer: 0, .. })));
    }

    #[test]
    fn already_factored_layer_is_rejected() {
        let f = LinearLayer::factored(Matrix::zeros(4, 1), Matrix::zeros(1, 4), vec![0.0; 4]).unwrap();
        assert!(matches!(compress_layer(&f, None, &weight_policy(0.9)), Err(CompressError::NotDense)));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn select_rank_is_monotone_in_theta(
            mut s in prop::collection::vec(0.0f64..10.0, 1..20),
            t1 in 0.01f64..1.0,
            t2 in 0.01f64..1.0,
        ) {
            s.sort_by(|a, b| b.total_cmp(a));
            prop_assume!(s[0] > 0.0);
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            prop_assert!(select_rank(&s, lo).unwrap() <= select_rank(&s, hi).unwrap());
        }

        #[test]
        fn weight_svd_error_bounded_by_next_singular_value(
            seed in 0u64..10_000,
            theta in 0.5f64..0.99,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = Matrix::from_fn(20, 12, |_, _| rng.random_range(-1.0..1.0));
            let layer = LinearLayer::dense(w.clone(), vec![0.0; 20]).unwrap();
            let (out, o) = compress_layer(&layer, None, &weight_policy(theta)).unwrap();
            let (s, _, _) = sorted_svd(&w.to_nalgebra());
            let next = s.get(o.selected_rank).copied().unwrap_or(0.0);
            let mut x = Matrix::from_fn(6, 12, |_, _| rng.random_range(-1.0..1.0));
            let norm = x.frobenius_norm() as f32;
            crate::tensor::scale_in_place(&mut x, 1.0 / norm, &mut FlopCounter::new());
            prop_assume!(o.substituted);
            let err = (layer.apply(&x).unwrap().to_nalgebra() - out.apply(&x).unwrap().to_nalgebra()).norm();
            prop_assert!(err <= next * x.frobenius_norm() + 1e-4, "{} > {}", err, next);
        }
    }
}
