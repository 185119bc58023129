//! Perturbation generators, error metrics and a resumable batch runner.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use nalgebra::Unit;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::align::{register, AlignmentResult, RegisterConfig};
use crate::cloud::{Point3, PointCloud};
use crate::error::{Error, Result};
use crate::index::{average_knn_distance, normals_or_estimate};
use crate::io::{load_cloud, save_colored_ply, CloudFormat};
use crate::partial::register_partial;
use crate::transform::{rot_x, rot_y, rot_z, Similarity};

/// Neighbour count used for the mean spacing `l_k` and for normal
/// estimation.
pub const DEFAULT_NOISE_K: usize = 12;

fn default_scale_lo() -> f64 {
    0.8
}
fn default_scale_hi() -> f64 {
    1.2
}
fn default_min_rot() -> f64 {
    30.0
}
fn default_k() -> usize {
    DEFAULT_NOISE_K
}
fn default_max_drop() -> f64 {
    0.8
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Perturbation {
    Similarity {
        #[serde(default = "default_scale_lo")]
        scale_lo: f64,
        #[serde(default = "default_scale_hi")]
        scale_hi: f64,
        #[serde(default = "default_min_rot")]
        min_rot_deg: f64,
    },
    GaussianNoise {
        range: f64,
        #[serde(default = "default_k")]
        k: usize,
    },
    NonzeroMeanNoise {
        range: f64,
        #[serde(default = "default_k")]
        k: usize,
    },
    /// Random dropout whose probability grows linearly along a random
    /// direction, from 0 to `max_drop`.
    Density {
        #[serde(default = "default_max_drop")]
        max_drop: f64,
    },
    Defect {
        fraction: f64,
    },
}

impl Perturbation {
    pub fn similarity() -> Self {
        Perturbation::Similarity {
            scale_lo: default_scale_lo(),
            scale_hi: default_scale_hi(),
            min_rot_deg: default_min_rot(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseKind {
    Gaussian,
    NonzeroMean,
}

/// Euler angles and scale drawn by [`perturb_similarity`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityDraw {
    pub angles: [f64; 3],
    pub scale: f64,
    pub transform: Similarity,
}

pub fn draw_similarity(
    cloud: &PointCloud,
    rng: &mut impl Rng,
    scale_lo: f64,
    scale_hi: f64,
    min_rot_deg: f64,
) -> Result<SimilarityDraw> {
    if !(scale_lo > 0.0 && scale_lo <= scale_hi) || !(0.0..180.0).contains(&min_rot_deg) {
        return Err(Error::InvalidParams(format!(
            "similarity ranges: scale [{scale_lo}, {scale_hi}], rotation floor {min_rot_deg}"
        )));
    }
    let lo = min_rot_deg.to_radians();
    let hi = 2.0 * PI - lo;
    let angles = [
        rng.random_range(lo..=hi),
        rng.random_range(lo..=hi),
        rng.random_range(lo..=hi),
    ];
    let scale = rng.random_range(scale_lo..=scale_hi);
    let diagonal = cloud.bounding_box().diagonal();
    let direction = loop {
        let v = Point3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 1e-6 && n <= 1.0 {
            break v / n;
        }
    };
    let translation = direction * rng.random_range(0.0..=diagonal);
    let rotation = rot_z(angles[2]) * rot_y(angles[1]) * rot_x(angles[0]);
    Ok(SimilarityDraw {
        angles,
        scale,
        transform: Similarity {
            rotation,
            scale,
            translation,
        },
    })
}

/// Applies a random similarity: uniform scale in `[scale_lo, scale_hi]`,
/// per-axis rotations in `[min_rot_deg, 360 - min_rot_deg]` degrees and a
/// translation no longer than the bounding-box diagonal.
pub fn perturb_similarity(
    cloud: &PointCloud,
    seed: u64,
    scale_lo: f64,
    scale_hi: f64,
    min_rot_deg: f64,
) -> Result<(PointCloud, Similarity)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = draw_similarity(cloud, &mut rng, scale_lo, scale_hi, min_rot_deg)?;
    Ok((cloud.transformed(&draw.transform), draw.transform))
}

/// Signed displacement magnitudes for `n` points.
pub fn noise_magnitudes(kind: NoiseKind, sigma: f64, n: usize, rng: &mut impl Rng) -> Vec<f64> {
    if sigma == 0.0 {
        return vec![0.0; n];
    }
    match kind {
        NoiseKind::Gaussian => {
            let normal = Normal::new(0.0, sigma).expect("sigma is finite and positive");
            (0..n).map(|_| normal.sample(rng)).collect()
        }
        NoiseKind::NonzeroMean => (0..n).map(|_| rng.random_range(0.0..sigma)).collect(),
    }
}

/// Moves every point along its normal by a random amount with scale
/// `sigma = range * l_k`, `l_k` being the mean distance to the `k` nearest
/// neighbours.
pub fn add_noise(cloud: &PointCloud, kind: NoiseKind, range: f64, k: usize, seed: u64) -> Result<PointCloud> {
    add_noise_with(cloud, kind, range, k, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn add_noise_with(
    cloud: &PointCloud,
    kind: NoiseKind,
    range: f64,
    k: usize,
    rng: &mut impl Rng,
) -> Result<PointCloud> {
    if !(range >= 0.0 && range.is_finite()) {
        return Err(Error::InvalidParams(format!("noise range {range}")));
    }
    if range == 0.0 {
        return Ok(cloud.clone());
    }
    let sigma = range * average_knn_distance(cloud, k)?;
    let normals = normals_or_estimate(cloud, k)?;
    let m = noise_magnitudes(kind, sigma, cloud.len(), rng);
    let points = cloud
        .points()
        .iter()
        .zip(&normals)
        .zip(&m)
        .map(|((p, n), m)| p + n * *m)
        .collect();
    PointCloud::with_normals(points, normals, cloud.name())
}

/// Removes `round(fraction * n)` points forming a cap on the side of a
/// randomly chosen point, cut by a plane orthogonal to the direction from
/// the centroid to that point. Returns the remaining cloud and the original
/// indices it keeps.
pub fn delete_defect(cloud: &PointCloud, fraction: f64, seed: u64) -> Result<(PointCloud, Vec<usize>)> {
    delete_defect_with(cloud, fraction, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn delete_defect_with(cloud: &PointCloud, fraction: f64, rng: &mut impl Rng) -> Result<(PointCloud, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 0.5) {
        return Err(Error::BadFraction(fraction));
    }
    let points = cloud.points();
    let c = cloud.centroid();
    let axis = defect_axis(cloud, rng);
    let remove = (fraction * points.len() as f64).round() as usize;
    let mut order: Vec<(f64, usize)> = points.iter().enumerate().map(|(i, p)| ((p - c).dot(&axis), i)).collect();
    order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut kept: Vec<usize> = order[remove..].iter().map(|&(_, i)| i).collect();
    kept.sort_unstable();
    Ok((cloud.select(&kept)?, kept))
}

/// Direction from the centroid to a randomly drawn point.
fn defect_axis(cloud: &PointCloud, rng: &mut impl Rng) -> Point3 {
    let points = cloud.points();
    let anchor = points[rng.random_range(0..points.len())];
    Unit::try_new(anchor - cloud.centroid(), 1e-12)
        .map(|u| u.into_inner())
        .unwrap_or_else(Point3::x)
}

fn density_dropout(cloud: &PointCloud, max_drop: f64, rng: &mut impl Rng) -> Result<(PointCloud, Vec<usize>)> {
    if !(0.0..1.0).contains(&max_drop) {
        return Err(Error::InvalidParams(format!("max_drop {max_drop} outside [0, 1)")));
    }
    let axis = loop {
        let v = Point3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        if v.norm() > 1e-3 && v.norm() <= 1.0 {
            break v.normalize();
        }
    };
    let proj: Vec<f64> = cloud.points().iter().map(|p| p.dot(&axis)).collect();
    let lo = proj.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = proj.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(f64::MIN_POSITIVE);
    let kept: Vec<usize> = proj
        .iter()
        .enumerate()
        .filter(|&(_, t)| rng.random::<f64>() >= max_drop * (t - lo) / span)
        .map(|(i, _)| i)
        .collect();
    Ok((cloud.select(&kept)?, kept))
}

/// A perturbed source together with where each of its points belongs in
/// the reference frame.
#[derive(Debug, Clone)]
pub struct PerturbedPair {
    pub source: PointCloud,
    /// Source points mapped back through the inverse of the applied
    /// similarity, index-aligned with `source`.
    pub ground_truth: PointCloud,
    /// Accumulated similarity applied to the reference.
    pub transform: Similarity,
    /// Reference indices surviving deletions.
    pub kept: Vec<usize>,
}

/// Applies `perturbations` in order. Normals are estimated up front when
/// the cloud has none, so that noise and evaluation share them.
pub fn apply_perturbations(cloud: &PointCloud, perturbations: &[Perturbation], seed: u64) -> Result<PerturbedPair> {
    let mut current = cloud.clone();
    if current.normals().is_none() && current.len() > 3 {
        let normals = normals_or_estimate(&current, DEFAULT_NOISE_K)?;
        current.set_normals(normals)?;
    }
    let mut transform = Similarity::identity();
    let mut kept: Vec<usize> = (0..cloud.len()).collect();
    for (i, p) in perturbations.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64 + 1);
        match *p {
            Perturbation::Similarity {
                scale_lo,
                scale_hi,
                min_rot_deg,
            } => {
                let draw = draw_similarity(&current, &mut rng, scale_lo, scale_hi, min_rot_deg)?;
                current = current.transformed(&draw.transform);
                transform = draw.transform.compose(&transform);
            }
            Perturbation::GaussianNoise { range, k } => {
                current = add_noise_with(&current, NoiseKind::Gaussian, range, k, &mut rng)?;
            }
            Perturbation::NonzeroMeanNoise { range, k } => {
                current = add_noise_with(&current, NoiseKind::NonzeroMean, range, k, &mut rng)?;
            }
            Perturbation::Density { max_drop } => {
                let (c, idx) = density_dropout(&current, max_drop, &mut rng)?;
                kept = idx.iter().map(|&j| kept[j]).collect();
                current = c;
            }
            Perturbation::Defect { fraction } => {
                let (c, idx) = delete_defect_with(&current, fraction, &mut rng)?;
                kept = idx.iter().map(|&j| kept[j]).collect();
                current = c;
            }
        }
    }
    let ground_truth = current.transformed(&transform.inverse());
    Ok(PerturbedPair {
        source: current,
        ground_truth,
        transform,
        kept,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub pair_id: String,
    pub mse: f64,
    pub rmse: f64,
    pub mae: f64,
    /// Normal-angle residuals in radians; NaN without normals.
    pub mse_r: f64,
    pub rmse_r: f64,
    pub mae_r: f64,
    pub wall_ms: BTreeMap<String, f64>,
}

fn moments(values: impl Iterator<Item = f64>) -> (f64, f64, f64) {
    let (mut sq, mut abs, mut n) = (0.0, 0.0, 0usize);
    for v in values {
        sq += v * v;
        abs += v.abs();
        n += 1;
    }
    let mse = sq / n as f64;
    (mse, mse.sqrt(), abs / n as f64)
}

/// Per-index residuals between a registered source and its ground truth.
pub fn evaluate(registered: &PointCloud, ground_truth: &PointCloud) -> Result<BenchReport> {
    if registered.len() != ground_truth.len() {
        return Err(Error::SizeMismatch {
            left: registered.len(),
            right: ground_truth.len(),
        });
    }
    let (mse, rmse, mae) = moments(
        registered
            .points()
            .iter()
            .zip(ground_truth.points())
            .map(|(a, b)| (a - b).norm()),
    );
    let (mse_r, rmse_r, mae_r) = match (registered.normals(), ground_truth.normals()) {
        (Some(a), Some(b)) => moments(a.iter().zip(b).map(|(a, b)| a.cross(b).norm().atan2(a.dot(b)))),
        _ => (f64::NAN, f64::NAN, f64::NAN),
    };
    Ok(BenchReport {
        pair_id: String::new(),
        mse,
        rmse,
        mae,
        mse_r,
        rmse_r,
        mae_r,
        wall_ms: BTreeMap::new(),
    })
}

/// Red for the largest residual, blue for zero.
pub fn residual_colors(residuals: &[f64]) -> Vec<[u8; 3]> {
    let max = residuals.iter().copied().fold(0.0, f64::max);
    residuals
        .iter()
        .map(|&r| {
            let t = if max > 0.0 { r / max } else { 0.0 };
            let red = (255.0 * t).round() as u8;
            [red, 0, 255 - red]
        })
        .collect()
}

/// One line of a suite manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSpec {
    #[serde(default)]
    pub id: Option<String>,
    pub source: PathBuf,
    pub target: PathBuf,
    #[serde(default)]
    pub perturbations: Vec<Perturbation>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub partial: bool,
}

pub fn read_manifest(path: &Path) -> Result<Vec<PairSpec>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|(n, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), n + 1)))
        })
        .collect()
}

pub const CSV_HEADER: &str = "pair_id,mse,rmse,mae,mse_r,rmse_r,mae_r,e_d_init,e_d_final,used_additional,ms_simplify,ms_grid,ms_icp,ms_total";

#[derive(Debug, Clone)]
pub struct PairOutcome {
    pub report: BenchReport,
    pub alignment: AlignmentResult,
    pub perturbed: PerturbedPair,
    pub residuals: Vec<f64>,
}

/// Perturbs `source`, registers it onto `target` and scores the result.
pub fn run_pair(
    source: &PointCloud,
    target: &PointCloud,
    perturbations: &[Perturbation],
    seed: u64,
    partial: bool,
    config: &RegisterConfig,
) -> Result<PairOutcome> {
    let perturbed = apply_perturbations(source, perturbations, seed)?;
    let start = Instant::now();
    let alignment = if partial {
        register_partial(&perturbed.source, target, config)?
    } else {
        register(&perturbed.source, target, config)?
    };
    let wall = start.elapsed().as_secs_f64() * 1e3;
    let registered = perturbed.source.transformed(&alignment.similarity);
    let mut report = evaluate(&registered, &perturbed.ground_truth)?;
    let t = &alignment.timings;
    report.wall_ms = BTreeMap::from([
        ("simplify".to_string(), t.simplify_ms),
        ("grid".to_string(), t.grid_ms),
        ("icp".to_string(), t.icp_ms),
        ("total".to_string(), wall),
    ]);
    let residuals = registered
        .points()
        .iter()
        .zip(perturbed.ground_truth.points())
        .map(|(a, b)| (a - b).norm())
        .collect();
    Ok(PairOutcome {
        report,
        alignment,
        perturbed,
        residuals,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SuiteOptions {
    /// Write stage timings into the CSV. Without them the CSV is a pure
    /// function of the inputs.
    pub timings: bool,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self { timings: true }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SuiteSummary {
    pub pairs: usize,
    pub computed: usize,
    pub skipped: usize,
    pub csv: PathBuf,
}

fn csv_row(id: &str, r: &BenchReport, a: &AlignmentResult, timings: bool) -> String {
    let ms = |key: &str| {
        if timings {
            format!("{:.3}", r.wall_ms.get(key).copied().unwrap_or(f64::NAN))
        } else {
            String::new()
        }
    };
    format!(
        "{id},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{},{},{},{},{}",
        r.mse,
        r.rmse,
        r.mae,
        r.mse_r,
        r.rmse_r,
        r.mae_r,
        a.energy_init,
        a.energy,
        a.used_additional_process,
        ms("simplify"),
        ms("grid"),
        ms("icp"),
        ms("total"),
    )
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn pair_id(spec: &PairSpec, line: usize) -> String {
    spec.id.clone().unwrap_or_else(|| format!("pair_{line:04}"))
}

/// Runs every pair of `manifest`, writing `results.csv` plus a
/// `transform.json` and `residuals.ply` per pair under `out`. Pairs whose
/// outputs already exist are not recomputed.
pub fn run_suite(manifest: &Path, out: &Path, config: &RegisterConfig, options: SuiteOptions) -> Result<SuiteSummary> {
    let specs = read_manifest(manifest)?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut rows = Vec::with_capacity(specs.len());
    let mut summary = SuiteSummary {
        pairs: specs.len(),
        ..SuiteSummary::default()
    };
    for (line, spec) in specs.iter().enumerate() {
        let id = pair_id(spec, line);
        let dir = out.join(&id);
        let row_path = dir.join("row.csv");
        if let Ok(row) = fs::read_to_string(&row_path) {
            info!("{id}: already complete");
            summary.skipped += 1;
            rows.push(row.trim_end().to_string());
            continue;
        }
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let source = load_cloud(base.join(&spec.source), CloudFormat::Auto)?;
        let target = load_cloud(base.join(&spec.target), CloudFormat::Auto)?;
        let mut outcome = run_pair(&source, &target, &spec.perturbations, spec.seed, spec.partial, config)?;
        outcome.report.pair_id = id.clone();

        let mut json = outcome.alignment.to_json();
        json["pair_id"] = serde_json::json!(id);
        json["ground_truth"] = serde_json::json!(outcome.perturbed.transform.inverse().row_major());
        let text = serde_json::to_string_pretty(&json).map_err(|e| Error::Format(e.to_string()))?;
        write_atomic(&dir.join("transform.json"), text.as_bytes())?;
        let registered = outcome.perturbed.source.transformed(&outcome.alignment.similarity);
        save_colored_ply(&registered, &residual_colors(&outcome.residuals), dir.join("residuals.ply"))?;

        let row = csv_row(&id, &outcome.report, &outcome.alignment, options.timings);
        write_atomic(&row_path, format!("{row}\n").as_bytes())?;
        info!("{id}: mse {:e}", outcome.report.mse);
        summary.computed += 1;
        rows.push(row);
    }
    let csv = out.join("results.csv");
    let mut file = fs::File::create(&csv).map_err(|e| Error::io(&csv, e))?;
    writeln!(file, "{CSV_HEADER}").map_err(|e| Error::io(&csv, e))?;
    for row in &rows {
        writeln!(file, "{row}").map_err(|e| Error::io(&csv, e))?;
    }
    summary.csv = csv;
    Ok(summary)
}
