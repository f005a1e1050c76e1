//! Synthetic paired-sequence benchmarks and their on-disk format.
//!
//! A ground-truth 2-D Hénon orbit `z_t` drives two observation streams
//! `x¹_t = W_x z_t + ε` and `x²_t = W_y z_t + ε`, with the projections drawn
//! once per dataset. Randomness comes from one ChaCha stream per sequence
//! (stream `i + 1` for sequence `i`, stream 0 for the projections), so
//! parallel and serial generation agree bit for bit.
//!
//! Directory layout: `meta.json`, `x1.bin`, `x2.bin`, optional `z.bin` and
//! `labels.bin`. Tensors are row-major `[N][T][d]` little-endian `f32`;
//! labels are little-endian `i32`.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::Parallelism;

pub const FORMAT_VERSION: u32 = 1;
/// Orbits leaving `|x| ≤ DIVERGENCE_BOUND` are redrawn.
pub const DIVERGENCE_BOUND: f64 = 10.0;
pub const MAX_ORBIT_ATTEMPTS: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HenonParams {
    pub a: f64,
    pub b: f64,
    pub t_len: usize,
    pub n_seq: usize,
    pub dx: usize,
    pub dy: usize,
    pub noise_std: f64,
    pub init_x_range: [f64; 2],
    pub init_y_range: [f64; 2],
    pub seed: u64,
}

impl Default for HenonParams {
    fn default() -> Self {
        Self {
            a: 1.4,
            b: 0.3,
            t_len: 300,
            n_seq: 1000,
            dx: 120,
            dy: 120,
            noise_std: 0.05,
            init_x_range: [-1.0, 1.0],
            init_y_range: [-0.1, 0.1],
            seed: 0,
        }
    }
}

impl HenonParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParams(m.to_string()));
        if self.t_len < 2 {
            return bad("t_len must be at least 2");
        }
        if self.n_seq < 1 || self.dx < 1 || self.dy < 1 {
            return bad("n_seq, dx and dy must be positive");
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad("noise_std must be finite and non-negative");
        }
        if ![self.a, self.b].iter().all(|v| v.is_finite()) {
            return bad("map coefficients must be finite");
        }
        for r in [self.init_x_range, self.init_y_range] {
            if !(r[0].is_finite() && r[1].is_finite() && r[0] < r[1]) {
                return bad("initial-condition ranges must be finite with lo < hi");
            }
        }
        Ok(())
    }
}

/// One application of the Hénon map: `(1 − a·x² + y, b·x)`.
pub fn henon_step(state: (f64, f64), a: f64, b: f64) -> (f64, f64) {
    let (x, y) = state;
    (1.0 - a * x * x + y, b * x)
}

/// Where a split came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitProvenance {
    pub parent_generator: String,
    pub parent_seed: u64,
    pub parent_n: usize,
    pub split_seed: u64,
    pub train_fraction: f64,
    pub part: String,
    pub indices: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub format_version: u32,
    pub generator: String,
    pub params: Vec<HenonParams>,
    pub seed: u64,
    pub n: usize,
    pub t: usize,
    pub dx: usize,
    pub dy: usize,
    pub dz: Option<usize>,
    pub has_labels: bool,
    /// `dx × 2` projection, row-major rows.
    pub w_x: Vec<Vec<f64>>,
    pub w_y: Vec<Vec<f64>>,
    pub split: Option<SplitProvenance>,
}

/// `N` paired sequences, stored at `f32` precision.
#[derive(Clone, Debug, PartialEq)]
pub struct SequencePairDataset {
    pub x1: Vec<f32>,
    pub x2: Vec<f32>,
    pub z_true: Option<Vec<f32>>,
    pub labels: Option<Vec<i32>>,
    pub meta: DatasetMeta,
}

impl SequencePairDataset {
    pub fn n(&self) -> usize {
        self.meta.n
    }

    pub fn t(&self) -> usize {
        self.meta.t
    }

    pub fn dx(&self) -> usize {
        self.meta.dx
    }

    pub fn dy(&self) -> usize {
        self.meta.dy
    }

    pub fn dz(&self) -> Option<usize> {
        self.meta.dz
    }

    /// `[T][dx]` block of sequence `n`.
    pub fn x1_seq(&self, n: usize) -> &[f32] {
        let len = self.t() * self.dx();
        &self.x1[n * len..(n + 1) * len]
    }

    pub fn x2_seq(&self, n: usize) -> &[f32] {
        let len = self.t() * self.dy();
        &self.x2[n * len..(n + 1) * len]
    }

    pub fn z_seq(&self, n: usize) -> Option<&[f32]> {
        let dz = self.dz()?;
        let len = self.t() * dz;
        self.z_true.as_ref().map(|z| &z[n * len..(n + 1) * len])
    }

    /// Checks shapes, finiteness and label range against `meta`.
    pub fn validate(&self) -> Result<()> {
        let m = &self.meta;
        let check = |name: &str, len: usize, d: usize| {
            if len != m.n * m.t * d {
                return Err(Error::Format(format!("{name}: {len} values, meta declares {}×{}×{d}", m.n, m.t)));
            }
            Ok(())
        };
        check("x1", self.x1.len(), m.dx)?;
        check("x2", self.x2.len(), m.dy)?;
        match (&self.z_true, m.dz) {
            (Some(z), Some(dz)) if dz >= 1 => check("z", z.len(), dz)?,
            (None, None) => {}
            _ => return Err(Error::Format("z tensor presence does not match meta".into())),
        }
        if !self.x1.iter().chain(&self.x2).chain(self.z_true.iter().flatten()).all(|v| v.is_finite()) {
            return Err(Error::Format("dataset holds non-finite values".into()));
        }
        match (&self.labels, m.has_labels) {
            (Some(l), true) => {
                if l.len() != m.n {
                    return Err(Error::Format(format!("labels: {} entries for {} sequences", l.len(), m.n)));
                }
                let k = l.iter().copied().max().unwrap_or(0) + 1;
                if l.iter().any(|&v| v < 0) || k < 2 {
                    return Err(Error::Format("labels must lie in 0..K with K ≥ 2".into()));
                }
            }
            (None, false) => {}
            _ => return Err(Error::Format("label presence does not match meta".into())),
        }
        Ok(())
    }

    /// Sequences at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> SequencePairDataset {
        let gather = |data: &[f32], d: usize| {
            let len = self.t() * d;
            indices.iter().flat_map(|&i| data[i * len..(i + 1) * len].iter().copied()).collect::<Vec<_>>()
        };
        let mut meta = self.meta.clone();
        meta.n = indices.len();
        SequencePairDataset {
            x1: gather(&self.x1, self.dx()),
            x2: gather(&self.x2, self.dy()),
            z_true: self.z_true.as_ref().map(|z| gather(z, self.dz().unwrap())),
            labels: self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect()),
            meta,
        }
    }
}

fn draw_projection(rng: &mut ChaCha8Rng, rows: usize) -> Vec<Vec<f64>> {
    (0..rows).map(|_| (0..2).map(|_| StandardNormal.sample(rng)).collect()).collect()
}

struct Orbit {
    z: Vec<f64>,
    x1: Vec<f32>,
    x2: Vec<f32>,
}

fn simulate_sequence(p: &HenonParams, seed: u64, index: usize, w_x: &[Vec<f64>], w_y: &[Vec<f64>]) -> Result<Orbit> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    let mut z = Vec::with_capacity(2 * p.t_len);
    let mut accepted = false;
    for _ in 0..MAX_ORBIT_ATTEMPTS {
        z.clear();
        let mut s = (
            rng.random_range(p.init_x_range[0]..p.init_x_range[1]),
            rng.random_range(p.init_y_range[0]..p.init_y_range[1]),
        );
        let mut ok = true;
        for t in 0..p.t_len {
            if t > 0 {
                s = henon_step(s, p.a, p.b);
            }
            if !(s.0.abs() <= DIVERGENCE_BOUND && s.1.is_finite()) {
                ok = false;
                break;
            }
            z.push(s.0);
            z.push(s.1);
        }
        if ok {
            accepted = true;
            break;
        }
    }
    if !accepted {
        return Err(Error::DivergentOrbit { sequence: index, attempts: MAX_ORBIT_ATTEMPTS });
    }
    let mut project = |w: &[Vec<f64>], out: &mut Vec<f32>| {
        for zt in z.chunks(2) {
            for row in w {
                let eps = if p.noise_std > 0.0 {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    p.noise_std * e
                } else {
                    0.0
                };
                out.push((row[0] * zt[0] + row[1] * zt[1] + eps) as f32);
            }
        }
    };
    let mut x1 = Vec::with_capacity(p.t_len * p.dx);
    let mut x2 = Vec::with_capacity(p.t_len * p.dy);
    project(w_x, &mut x1);
    project(w_y, &mut x2);
    Ok(Orbit { z, x1, x2 })
}

fn assemble(orbits: Vec<Result<Orbit>>, labels: Option<Vec<i32>>, meta: DatasetMeta) -> Result<SequencePairDataset> {
    let mut x1 = Vec::new();
    let mut x2 = Vec::new();
    let mut z = Vec::new();
    for o in orbits {
        let o = o?;
        x1.extend(o.x1);
        x2.extend(o.x2);
        z.extend(o.z.iter().map(|v| *v as f32));
    }
    let ds = SequencePairDataset { x1, x2, z_true: Some(z), labels, meta };
    ds.validate()?;
    Ok(ds)
}

pub fn generate_henon(params: &HenonParams) -> Result<SequencePairDataset> {
    generate_henon_with(params, Parallelism::Sequential)
}

pub fn generate_henon_with(params: &HenonParams, par: Parallelism) -> Result<SequencePairDataset> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    rng.set_stream(0);
    let w_x = draw_projection(&mut rng, params.dx);
    let w_y = draw_projection(&mut rng, params.dy);
    let orbits = par.map(params.n_seq, |i| simulate_sequence(params, params.seed, i, &w_x, &w_y));
    let meta = DatasetMeta {
        format_version: FORMAT_VERSION,
        generator: "henon".into(),
        params: vec![params.clone()],
        seed: params.seed,
        n: params.n_seq,
        t: params.t_len,
        dx: params.dx,
        dy: params.dy,
        dz: Some(2),
        has_labels: false,
        w_x,
        w_y,
        split: None,
    };
    assemble(orbits, None, meta)
}

/// Two labelled regimes sharing one pair of projections. Sequences
/// `0..n_per_group` follow `params_a` (label 0), the rest `params_b` (label 1).
/// The `n_seq` and `seed` fields of both parameter sets are ignored.
pub fn generate_grouped(
    params_a: &HenonParams,
    params_b: &HenonParams,
    n_per_group: usize,
    seed: u64,
) -> Result<SequencePairDataset> {
    generate_grouped_with(params_a, params_b, n_per_group, seed, Parallelism::Sequential)
}

pub fn generate_grouped_with(
    params_a: &HenonParams,
    params_b: &HenonParams,
    n_per_group: usize,
    seed: u64,
    par: Parallelism,
) -> Result<SequencePairDataset> {
    params_a.validate()?;
    params_b.validate()?;
    if (params_a.t_len, params_a.dx, params_a.dy) != (params_b.t_len, params_b.dx, params_b.dy) {
        return Err(Error::InvalidParams("grouped regimes must share t_len, dx and dy".into()));
    }
    if n_per_group == 0 {
        return Err(Error::InvalidParams("n_per_group must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);
    let w_x = draw_projection(&mut rng, params_a.dx);
    let w_y = draw_projection(&mut rng, params_a.dy);
    let n = 2 * n_per_group;
    let orbits = par.map(n, |i| {
        let p = if i < n_per_group { params_a } else { params_b };
        simulate_sequence(p, seed, i, &w_x, &w_y)
    });
    let labels = (0..n).map(|i| i32::from(i >= n_per_group)).collect();
    let meta = DatasetMeta {
        format_version: FORMAT_VERSION,
        generator: "grouped".into(),
        params: vec![params_a.clone(), params_b.clone()],
        seed,
        n,
        t: params_a.t_len,
        dx: params_a.dx,
        dy: params_a.dy,
        dz: Some(2),
        has_labels: true,
        w_x,
        w_y,
        split: None,
    };
    assemble(orbits, Some(labels), meta)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { train_fraction: 0.8, seed: 0 }
    }
}

/// Index partition `(train, test)`; both sides sorted.
pub fn split_indices(n: usize, spec: &SplitSpec) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(Error::InvalidSplit(format!("train_fraction {} not in (0, 1)", spec.train_fraction)));
    }
    let n_train = (spec.train_fraction * n as f64).round() as usize;
    if n_train == 0 || n_train >= n {
        return Err(Error::InvalidSplit(format!(
            "{n} sequences at fraction {} leaves a side empty",
            spec.train_fraction
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    idx.shuffle(&mut rng);
    let mut train = idx[..n_train].to_vec();
    let mut test = idx[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

pub fn split(ds: &SequencePairDataset, spec: &SplitSpec) -> Result<(SequencePairDataset, SequencePairDataset)> {
    let (train_idx, test_idx) = split_indices(ds.n(), spec)?;
    let part = |indices: Vec<usize>, name: &str| {
        let mut out = ds.subset(&indices);
        out.meta.split = Some(SplitProvenance {
            parent_generator: ds.meta.generator.clone(),
            parent_seed: ds.meta.seed,
            parent_n: ds.n(),
            split_seed: spec.seed,
            train_fraction: spec.train_fraction,
            part: name.to_string(),
            indices,
        });
        out
    };
    Ok((part(train_idx, "train"), part(test_idx, "test")))
}

pub fn write_f32(path: &Path, data: &[f32]) -> Result<()> {
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Reads exactly `expected` little-endian `f32` values.
pub fn read_f32(path: &Path, expected: usize, tensor: &str) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::Format(format!("{tensor}: cannot read {}: {e}", path.display())))?;
    if bytes.len() != expected * 4 {
        return Err(Error::Format(format!(
            "{tensor}: {} holds {} bytes, expected {}",
            path.display(),
            bytes.len(),
            expected * 4
        )));
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

pub fn write_dataset(ds: &SequencePairDataset, dir: &Path) -> Result<()> {
    ds.validate()?;
    fs::create_dir_all(dir)?;
    fs::write(dir.join("meta.json"), serde_json::to_vec_pretty(&ds.meta)?)?;
    write_f32(&dir.join("x1.bin"), &ds.x1)?;
    write_f32(&dir.join("x2.bin"), &ds.x2)?;
    if let Some(z) = &ds.z_true {
        write_f32(&dir.join("z.bin"), z)?;
    }
    if let Some(labels) = &ds.labels {
        let bytes: Vec<u8> = labels.iter().flat_map(|l| l.to_le_bytes()).collect();
        fs::write(dir.join("labels.bin"), bytes)?;
    }
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<SequencePairDataset> {
    let meta_path = dir.join("meta.json");
    let raw =
        fs::read(&meta_path).map_err(|e| Error::Format(format!("meta: cannot read {}: {e}", meta_path.display())))?;
    let meta: DatasetMeta = serde_json::from_slice(&raw).map_err(|e| Error::Format(format!("meta.json: {e}")))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported format_version {}", meta.format_version)));
    }
    let x1 = read_f32(&dir.join("x1.bin"), meta.n * meta.t * meta.dx, "x1")?;
    let x2 = read_f32(&dir.join("x2.bin"), meta.n * meta.t * meta.dy, "x2")?;
    let z_true = match meta.dz {
        Some(dz) => Some(read_f32(&dir.join("z.bin"), meta.n * meta.t * dz, "z")?),
        None => None,
    };
    let labels = if meta.has_labels {
        let path = dir.join("labels.bin");
        let bytes =
            fs::read(&path).map_err(|e| Error::Format(format!("labels: cannot read {}: {e}", path.display())))?;
        if bytes.len() != meta.n * 4 {
            return Err(Error::Format(format!("labels: {} bytes, expected {}", bytes.len(), meta.n * 4)));
        }
        Some(bytes.chunks_exact(4).map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
    } else {
        None
    };
    let ds = SequencePairDataset { x1, x2, z_true, labels, meta };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> HenonParams {
        HenonParams { t_len: 50, n_seq: 6, dx: 5, dy: 4, seed: 3, ..HenonParams::default() }
    }

    #[test]
    fn henon_step_examples() {
        assert_eq!(henon_step((0.0, 0.0), 1.4, 0.3), (1.0, 0.0));
        let (x, y) = henon_step((1.0, 0.0), 1.4, 0.3);
        assert!((x + 0.4).abs() < 1e-15 && (y - 0.3).abs() < 1e-15);
    }

    #[test]
    fn long_orbit_stays_on_attractor() {
        let mut s = (0.1, 0.0);
        for _ in 0..1000 {
            s = henon_step(s, 1.4, 0.3);
            assert!(s.0.abs() < 1.5 && s.1.abs() < 0.45, "{s:?}");
        }
    }

    #[test]
    fn defaults_match_benchmark_settings() {
        let p = HenonParams::default();
        assert_eq!((p.a, p.b, p.t_len, p.n_seq, p.dx, p.dy), (1.4, 0.3, 300, 1000, 120, 120));
        assert_eq!(p.noise_std, 0.05);
        assert_eq!((p.init_x_range, p.init_y_range), ([-1.0, 1.0], [-0.1, 0.1]));
    }

    #[test]
    fn generated_shapes_and_finiteness() {
        let ds = generate_henon(&small()).unwrap();
        assert_eq!(ds.x1.len(), 6 * 50 * 5);
        assert_eq!(ds.x2.len(), 6 * 50 * 4);
        assert_eq!(ds.z_true.as_ref().unwrap().len(), 6 * 50 * 2);
        assert!(ds.z_true.unwrap().iter().all(|v| v.abs() <= DIVERGENCE_BOUND as f32));
    }

    #[test]
    fn parallel_generation_matches_serial() {
        let p = small();
        let a = generate_henon_with(&p, Parallelism::Sequential).unwrap();
        let b = generate_henon_with(&p, Parallelism::Rayon).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_params_rejected() {
        for p in [
            HenonParams { t_len: 1, ..small() },
            HenonParams { dx: 0, ..small() },
            HenonParams { noise_std: -0.1, ..small() },
            HenonParams { init_x_range: [1.0, -1.0], ..small() },
        ] {
            assert!(matches!(generate_henon(&p), Err(Error::InvalidParams(_))));
        }
    }

    #[test]
    fn escaping_orbits_exhaust_retries() {
        let p = HenonParams { init_x_range: [5.0, 6.0], ..small() };
        assert!(matches!(generate_henon(&p), Err(Error::DivergentOrbit { .. })));
    }

    #[test]
    fn grouped_labels() {
        let a = HenonParams { t_len: 20, dx: 3, dy: 3, ..HenonParams::default() };
        let b = HenonParams { a: 1.2, ..a.clone() };
        let ds = generate_grouped(&a, &b, 5, 9).unwrap();
        assert_eq!(ds.n(), 10);
        assert_eq!(ds.labels.as_ref().unwrap().iter().sum::<i32>(), 5);
        let c = HenonParams { dx: 4, ..b };
        assert!(generate_grouped(&a, &c, 5, 9).is_err());
    }

    #[test]
    fn split_sizes_and_partition() {
        let spec = SplitSpec { train_fraction: 0.8, seed: 1 };
        let (tr, te) = split_indices(10, &spec).unwrap();
        assert_eq!((tr.len(), te.len()), (8, 2));
        assert_eq!(split_indices(10, &spec).unwrap(), (tr.clone(), te.clone()));
        let mut all: Vec<usize> = tr.iter().chain(&te).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert!(matches!(split_indices(1, &spec), Err(Error::InvalidSplit(_))));
        assert!(split_indices(10, &SplitSpec { train_fraction: 1.0, seed: 0 }).is_err());
    }

    #[test]
    fn split_records_provenance() {
        let ds = generate_henon(&small()).unwrap();
        let (tr, te) = split(&ds, &SplitSpec { train_fraction: 0.5, seed: 2 }).unwrap();
        let prov = tr.meta.split.as_ref().unwrap();
        assert_eq!(prov.part, "train");
        assert_eq!(prov.parent_n, 6);
        assert_eq!(tr.n() + te.n(), 6);
        let i = prov.indices[0];
        assert_eq!(tr.x1_seq(0), ds.x1_seq(i));
    }
}
