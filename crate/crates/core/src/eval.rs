//! Evaluation: pooled latent correlation, clustering of pooled latent
//! features (k-means, NMI, silhouette), reconstruction reports and a PCA
//! feature baseline.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{SequencePairDataset, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::models::{predict_all, Checkpoint, LatentExtraction, PredictMode, Stage};
use crate::par::Parallelism;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrReport {
    pub format_version: u32,
    /// `rho_matrix[j][k]`: correlation of true dimension `j` with estimate `k`.
    pub rho_matrix: Vec<Vec<f64>>,
    pub rho_hat: f64,
    pub d: usize,
    pub dz_hat: usize,
    pub n: usize,
    pub t: usize,
}

/// Pooled Pearson correlation over all `(n, t)` with global means, and
/// `ρ̂ = (1/D) Σ_j max_k |ρ_jk|`. Both inputs are `[N][T][·]` row-major.
pub fn global_mean_corr(z_true: &[f64], d: usize, z_hat: &[f64], dh: usize, n: usize, t: usize) -> Result<CorrReport> {
    if d == 0 || dh == 0 {
        return Err(Error::ShapeMismatch("latent dimensions must be positive".into()));
    }
    let m = n * t;
    if z_true.len() != m * d || z_hat.len() != m * dh {
        return Err(Error::ShapeMismatch(format!(
            "expected {m}×{d} and {m}×{dh} values, got {} and {}",
            z_true.len(),
            z_hat.len()
        )));
    }
    let centered = |z: &[f64], dim: usize, what: &str| -> Result<(Vec<f64>, Vec<f64>)> {
        let mut mean = vec![0.0; dim];
        for row in z.chunks_exact(dim) {
            mean.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }
        mean.iter_mut().for_each(|a| *a /= m as f64);
        let c: Vec<f64> = z.chunks_exact(dim).flat_map(|row| row.iter().zip(&mean).map(|(x, mu)| x - mu)).collect();
        let mut ss = vec![0.0; dim];
        for row in c.chunks_exact(dim) {
            ss.iter_mut().zip(row).for_each(|(a, b)| *a += b * b);
        }
        if let Some(j) = ss.iter().position(|&s| s.is_nan() || s <= 0.0) {
            return Err(Error::DegenerateVariance(format!("{what} dimension {j} is constant")));
        }
        Ok((c, ss.iter().map(|s| s.sqrt()).collect()))
    };
    let (cz, sz) = centered(z_true, d, "true latent")?;
    let (ch, sh) = centered(z_hat, dh, "estimated latent")?;
    let mut rho = vec![vec![0.0; dh]; d];
    for (a, b) in cz.chunks_exact(d).zip(ch.chunks_exact(dh)) {
        for j in 0..d {
            for k in 0..dh {
                rho[j][k] += a[j] * b[k];
            }
        }
    }
    for j in 0..d {
        for k in 0..dh {
            rho[j][k] = (rho[j][k] / (sz[j] * sh[k])).clamp(-1.0, 1.0);
        }
    }
    let rho_hat = rho.iter().map(|r| r.iter().fold(0.0f64, |a, v| a.max(v.abs()))).sum::<f64>() / d as f64;
    Ok(CorrReport { format_version: FORMAT_VERSION, rho_matrix: rho, rho_hat, d, dz_hat: dh, n, t })
}

/// Correlates extracted `z⁰` means with the dataset's true latents at the
/// same positions (`0..T−1`).
pub fn corr_for_extraction(ds: &SequencePairDataset, ex: &LatentExtraction) -> Result<CorrReport> {
    let (Some(z), Some(dz)) = (&ds.z_true, ds.dz()) else {
        return Err(Error::MissingGroundTruth("dataset has no true latents".into()));
    };
    if ex.n != ds.n() || ex.steps + 1 != ds.t() {
        return Err(Error::ShapeMismatch(format!(
            "extraction covers {}×{} steps, dataset is {}×{}",
            ex.n,
            ex.steps,
            ds.n(),
            ds.t()
        )));
    }
    let mut truth = Vec::with_capacity(ex.n * ex.steps * dz);
    for i in 0..ds.n() {
        let seq = &z[i * ds.t() * dz..(i + 1) * ds.t() * dz];
        truth.extend(seq[..ex.steps * dz].iter().map(|&v| v as f64));
    }
    global_mean_corr(&truth, dz, &ex.z0.mean, ex.z0.dim, ex.n, ex.steps)
}

/// Per-sequence time mean followed by time std (population) of each column
/// of a `[steps][dim]` block.
fn mean_std(block: &[f64], dim: usize) -> Vec<f64> {
    let steps = block.len() / dim;
    let mut mean = vec![0.0; dim];
    for row in block.chunks_exact(dim) {
        mean.iter_mut().zip(row).for_each(|(a, b)| *a += b);
    }
    mean.iter_mut().for_each(|a| *a /= steps as f64);
    let mut var = vec![0.0; dim];
    for row in block.chunks_exact(dim) {
        var.iter_mut().zip(row.iter().zip(&mean)).for_each(|(a, (x, m))| *a += (x - m) * (x - m));
    }
    mean.into_iter().chain(var.into_iter().map(|v| (v / steps as f64).sqrt())).collect()
}

/// `[mean_t z⁰ₜ, std_t z⁰ₜ]` per sequence, length `2·dz0`.
pub fn pool_features(ex: &LatentExtraction) -> Vec<Vec<f64>> {
    (0..ex.n).map(|i| mean_std(ex.z0_mean_seq(i), ex.z0.dim)).collect()
}

/// Pooled features of the raw observations projected on their top `k`
/// principal axes (fitted on all `(n, t)` rows of `[x¹, x²]`).
pub fn pca_features(ds: &SequencePairDataset, k: usize) -> Result<Vec<Vec<f64>>> {
    let p = ds.dx() + ds.dy();
    if k == 0 || k > p {
        return Err(Error::InvalidK(format!("PCA rank {k} for {p}-dimensional observations")));
    }
    let rows: Vec<Vec<f64>> = (0..ds.n())
        .flat_map(|i| {
            let (a, b) = (ds.x1_seq(i), ds.x2_seq(i));
            (0..ds.t()).map(move |t| {
                a[t * ds.dx()..(t + 1) * ds.dx()]
                    .iter()
                    .chain(&b[t * ds.dy()..(t + 1) * ds.dy()])
                    .map(|&v| v as f64)
                    .collect()
            })
        })
        .collect();
    let m = rows.len() as f64;
    let mut mean = vec![0.0; p];
    for r in &rows {
        mean.iter_mut().zip(r).for_each(|(a, b)| *a += b / m);
    }
    let mut cov = DMatrix::<f64>::zeros(p, p);
    for r in &rows {
        let c: Vec<f64> = r.iter().zip(&mean).map(|(x, mu)| x - mu).collect();
        for i in 0..p {
            for j in 0..=i {
                cov[(i, j)] += c[i] * c[j] / m;
            }
        }
    }
    for i in 0..p {
        for j in 0..i {
            cov[(j, i)] = cov[(i, j)];
        }
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let axes: Vec<Vec<f64>> = order[..k]
        .iter()
        .map(|&c| {
            let v: Vec<f64> = eig.eigenvectors.column(c).iter().copied().collect();
            // Fix the sign so the largest-magnitude loading is positive.
            let big = v.iter().copied().fold(0.0f64, |a, x| if x.abs() > a.abs() { x } else { a });
            v.into_iter().map(|x| if big < 0.0 { -x } else { x }).collect()
        })
        .collect();
    let t = ds.t();
    Ok(rows
        .chunks(t)
        .map(|seq| {
            let proj: Vec<f64> = seq
                .iter()
                .flat_map(|r| {
                    axes.iter().map(|a| a.iter().zip(r.iter().zip(&mean)).map(|(w, (x, mu))| w * (x - mu)).sum())
                })
                .collect();
            mean_std(&proj, k)
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    pub labels: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    /// Inertia after each Lloyd iteration of the winning restart.
    pub trace: Vec<f64>,
    pub restart: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn assign(points: &[Vec<f64>], centroids: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let mut inertia = 0.0;
    let labels = points
        .iter()
        .map(|p| {
            let (best, d) = centroids
                .iter()
                .enumerate()
                .map(|(c, m)| (c, sq_dist(p, m)))
                .fold((0, f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc });
            inertia += d;
            best
        })
        .collect();
    (labels, inertia)
}

fn lloyd(points: &[Vec<f64>], k: usize, seed: u64, restart: usize) -> KMeansResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(restart as u64);
    // k-means++ seeding.
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    while centroids.len() < k {
        let d: Vec<f64> =
            points.iter().map(|p| centroids.iter().map(|c| sq_dist(p, c)).fold(f64::INFINITY, f64::min)).collect();
        let total: f64 = d.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = points.len() - 1;
            for (i, di) in d.iter().enumerate() {
                if u < *di {
                    pick = i;
                    break;
                }
                u -= di;
            }
            pick
        } else {
            rng.random_range(0..points.len())
        };
        centroids.push(points[next].clone());
    }
    let (mut labels, mut inertia) = assign(points, &centroids);
    let mut trace = vec![inertia];
    for _ in 0..300 {
        let dim = points[0].len();
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            sums[l].iter_mut().zip(p).for_each(|(a, b)| *a += b);
            counts[l] += 1;
        }
        for c in 0..k {
            // Empty clusters keep their previous centroid.
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        let (new_labels, new_inertia) = assign(points, &centroids);
        trace.push(new_inertia);
        let done = new_labels == labels;
        labels = new_labels;
        inertia = new_inertia;
        if done {
            break;
        }
    }
    KMeansResult { labels, centroids, inertia, trace, restart }
}

/// Best-of-`restarts` Lloyd's algorithm with k-means++ seeding. Ties go to
/// the lowest restart index.
pub fn kmeans(features: &[Vec<f64>], k: usize, seed: u64, restarts: usize) -> Result<KMeansResult> {
    kmeans_with(features, k, seed, restarts, Parallelism::Sequential)
}

pub fn kmeans_with(
    features: &[Vec<f64>],
    k: usize,
    seed: u64,
    restarts: usize,
    par: Parallelism,
) -> Result<KMeansResult> {
    if k < 2 || features.len() < k {
        return Err(Error::InvalidK(format!("k={k} for {} points", features.len())));
    }
    let dim = features[0].len();
    if dim == 0 || features.iter().any(|f| f.len() != dim) {
        return Err(Error::ShapeMismatch("features must share a positive length".into()));
    }
    let runs = par.map(restarts.max(1), |r| lloyd(features, k, seed, r));
    Ok(runs.into_iter().reduce(|best, r| if r.inertia < best.inertia { r } else { best }).expect("one restart"))
}

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts.filter(|&c| c > 0).map(|c| c as f64 / n).map(|p| -p * p.ln()).sum()
}

/// Mutual information normalized by the arithmetic mean of the two label
/// entropies. Two single-cluster labelings score 1.
pub fn nmi(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch(a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(Error::LengthMismatch(a.len(), 2));
    }
    let n = a.len() as f64;
    let ka = a.iter().max().unwrap() + 1;
    let kb = b.iter().max().unwrap() + 1;
    let mut joint = vec![0usize; ka * kb];
    let mut ca = vec![0usize; ka];
    let mut cb = vec![0usize; kb];
    for (&x, &y) in a.iter().zip(b) {
        joint[x * kb + y] += 1;
        ca[x] += 1;
        cb[y] += 1;
    }
    let (ha, hb) = (entropy(ca.iter().copied(), n), entropy(cb.iter().copied(), n));
    if ha == 0.0 && hb == 0.0 {
        return Ok(1.0);
    }
    let mut mi = 0.0;
    for x in 0..ka {
        for y in 0..kb {
            let c = joint[x * kb + y];
            if c > 0 {
                let pxy = c as f64 / n;
                mi += pxy * (pxy / ((ca[x] as f64 / n) * (cb[y] as f64 / n))).ln();
            }
        }
    }
    Ok((mi / (0.5 * (ha + hb))).clamp(0.0, 1.0))
}

/// Mean silhouette with Euclidean distance; members of singleton clusters
/// score 0.
pub fn silhouette(features: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if features.len() != labels.len() {
        return Err(Error::LengthMismatch(features.len(), labels.len()));
    }
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; k];
    labels.iter().for_each(|&l| sizes[l] += 1);
    if sizes.iter().filter(|&&s| s > 0).count() < 2 {
        return Err(Error::SingleCluster);
    }
    let dist = |a: &[f64], b: &[f64]| sq_dist(a, b).sqrt();
    let mut total = 0.0;
    for (i, (p, &li)) in features.iter().zip(labels).enumerate() {
        if sizes[li] == 1 {
            continue;
        }
        let mut sums = vec![0.0; k];
        for (j, (q, &lj)) in features.iter().zip(labels).enumerate() {
            if i != j {
                sums[lj] += dist(p, q);
            }
        }
        let a = sums[li] / (sizes[li] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != li && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        total += if m > 0.0 { (b - a) / m } else { 0.0 };
    }
    Ok((total / features.len() as f64).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub format_version: u32,
    pub nmi: f64,
    pub silhouette: f64,
    pub k: usize,
    pub features: String,
    pub labels: Vec<usize>,
}

/// k-means on `features`, scored against `truth` (NMI) and internally
/// (silhouette).
pub fn cluster_report(
    features: &[Vec<f64>],
    truth: &[usize],
    k: usize,
    seed: u64,
    restarts: usize,
    feature_spec: &str,
) -> Result<ClusterReport> {
    let km = kmeans(features, k, seed, restarts)?;
    let nmi = nmi(truth, &km.labels)?;
    let silhouette = match silhouette(features, &km.labels) {
        Ok(s) => s,
        Err(Error::SingleCluster) => 0.0,
        Err(e) => return Err(e),
    };
    Ok(ClusterReport {
        format_version: FORMAT_VERSION,
        nmi,
        silhouette,
        k,
        features: feature_spec.into(),
        labels: km.labels,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconRow {
    /// Time index of the predicted observation.
    pub t: usize,
    /// Index into the concatenated observation `[x¹, x²]`.
    pub dim: usize,
    pub actual: f64,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconReport {
    pub rows: Vec<ReconRow>,
    /// Fraction of rows with `|actual − mean| ≤ 2·std`.
    pub coverage: f64,
}

impl ReconReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,dim,actual,mean,std\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{},{}\n", r.t, r.dim, r.actual, r.mean, r.std));
        }
        s
    }
}

fn within(actual: f64, mean: f64, std: f64) -> bool {
    (actual - mean).abs() <= 2.0 * std
}

/// One-step-ahead predictions for sequence `seq` at the chosen dimensions of
/// `[x¹, x²]`, one row per `(t, dim)` for `t = 1..T`.
pub fn recon_report(
    ckpt: &Checkpoint,
    ds: &SequencePairDataset,
    seq: usize,
    dims: &[usize],
    stage: Stage,
) -> Result<ReconReport> {
    if seq >= ds.n() {
        return Err(Error::IndexOutOfRange(format!("sequence {seq} of {}", ds.n())));
    }
    let (dx, dy) = (ds.dx(), ds.dy());
    if let Some(&d) = dims.iter().find(|&&d| d >= dx + dy) {
        return Err(Error::IndexOutOfRange(format!("dimension {d} of {}", dx + dy)));
    }
    let preds = predict_all(ckpt, ds, seq, stage, PredictMode::Mean)?;
    let (x1, x2) = (ds.x1_seq(seq), ds.x2_seq(seq));
    let mut rows = Vec::with_capacity(preds.len() * dims.len());
    for (i, p) in preds.iter().enumerate() {
        let t = i + 1;
        for &d in dims {
            let (actual, g, j) = if d < dx { (x1[t * dx + d], &p.x1, d) } else { (x2[t * dy + d - dx], &p.x2, d - dx) };
            rows.push(ReconRow { t, dim: d, actual: actual as f64, mean: g.mean[j], std: g.std[j] });
        }
    }
    let hit = rows.iter().filter(|r| within(r.actual, r.mean, r.std)).count();
    let coverage = if rows.is_empty() { 0.0 } else { hit as f64 / rows.len() as f64 };
    Ok(ReconReport { rows, coverage })
}

/// Fraction of all observation components of all sequences lying within the
/// one-step-ahead predictive mean ± 2·std.
pub fn coverage(ckpt: &Checkpoint, ds: &SequencePairDataset, stage: Stage) -> Result<f64> {
    let (dx, dy) = (ds.dx(), ds.dy());
    let mut hit = 0usize;
    let mut total = 0usize;
    for seq in 0..ds.n() {
        let preds = predict_all(ckpt, ds, seq, stage, PredictMode::Mean)?;
        let (x1, x2) = (ds.x1_seq(seq), ds.x2_seq(seq));
        for (i, p) in preds.iter().enumerate() {
            let t = i + 1;
            for j in 0..dx {
                hit += within(x1[t * dx + j] as f64, p.x1.mean[j], p.x1.std[j]) as usize;
            }
            for j in 0..dy {
                hit += within(x2[t * dy + j] as f64, p.x2.mean[j], p.x2.std[j]) as usize;
            }
            total += dx + dy;
        }
    }
    Ok(hit as f64 / total.max(1) as f64)
}
