//! Evaluation metrics for AM outputs and the diffusion-degree study.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::ClassifierModel;
use crate::diffgraph::nearest_neighbours;
use crate::error::{contract, numeric, Result};
use crate::shapes::{derive_seed, random_cloud_gaussian, random_cloud_uniform, DatasetSplit, PointCloud};

/// Floor applied to FID and CD before taking logs in a report.
pub const LOG_FLOOR: f64 = 1e-12;
/// Probability floor inside the KL terms of the modified inception score.
pub const PROB_FLOOR: f64 = 1e-12;
pub const DEFAULT_REG_EPS: f64 = 1e-6;

/// Mean over points of `x_g` of the Euclidean distance to the nearest point
/// of `x_i`. Not symmetric.
pub fn chamfer(x_g: &PointCloud, x_i: &PointCloud) -> Result<f64> {
    if x_g.is_empty() || x_i.is_empty() {
        return contract("chamfer of an empty cloud");
    }
    let mut nn = vec![0; x_g.len()];
    let mut dist = vec![0.0; x_g.len()];
    Ok(nearest_neighbours(&x_g.flat(), &x_i.flat(), &mut nn, &mut dist) / x_g.len() as f64)
}

/// Draws `k` distinct test instances of `label`.
pub fn draw_references(split: &DatasetSplit, label: usize, k: usize, seed: u64) -> Result<Vec<&PointCloud>> {
    let pool: Vec<&PointCloud> = split.test_of_class(label).map(|c| &c.cloud).collect();
    if k == 0 || pool.len() < k {
        return contract(format!("class {label} has {} test instances, {k} references requested", pool.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(index::sample(&mut rng, pool.len(), k).into_iter().map(|i| pool[i]).collect())
}

/// Mean Chamfer from `x_g` to `k_refs` seeded random test instances of `label`.
pub fn chamfer_to_class(x_g: &PointCloud, split: &DatasetSplit, label: usize, k_refs: usize, seed: u64) -> Result<f64> {
    let refs = draw_references(split, label, k_refs, seed)?;
    let mut total = 0.0;
    for r in &refs {
        total += chamfer(x_g, r)?;
    }
    Ok(total / refs.len() as f64)
}

/// Minimum-cost perfect matching for a square cost matrix (row-major).
/// Returns `assignment[row] = column`.
pub fn hungarian(cost: &[f64], n: usize) -> Result<Vec<usize>> {
    if cost.len() != n * n {
        return contract(format!("cost matrix has {} entries, expected {n}²", cost.len()));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return numeric("non-finite assignment cost");
    }
    // potentials u (rows) and v (columns); p[j] = row matched to column j,
    // with row/column 0 as the virtual start
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        assignment[p[j] - 1] = j - 1;
    }
    Ok(assignment)
}

fn distance_matrix(x: &PointCloud, y: &PointCloud) -> Vec<f64> {
    x.points()
        .iter()
        .flat_map(|a| y.points().iter().map(move |b| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()))
        .collect()
}

/// Exact earth mover's distance between equal-size clouds: the minimum over
/// perfect matchings of the mean matched Euclidean distance.
pub fn emd_exact(x: &PointCloud, y: &PointCloud) -> Result<f64> {
    let n = x.len();
    if n != y.len() {
        return contract(format!("EMD needs equal sizes, got {n} and {}", y.len()));
    }
    if n == 0 {
        return contract("EMD of empty clouds");
    }
    let cost = distance_matrix(x, y);
    let a = hungarian(&cost, n)?;
    Ok(a.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum::<f64>() / n as f64)
}

/// Gaussian fit of a set of feature vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mu: Vec<f64>,
    /// Row-major `d × d`.
    pub sigma: Vec<f64>,
    pub sample_count: usize,
}

impl FeatureStats {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// Mean and sample covariance (divisor `N − 1`) plus `reg_eps · I`.
pub fn feature_stats_from_features(features: &[Vec<f64>], reg_eps: f64) -> Result<FeatureStats> {
    let n = features.len();
    if n < 2 {
        return contract(format!("feature statistics need at least 2 samples, got {n}"));
    }
    let d = features[0].len();
    if d == 0 || features.iter().any(|f| f.len() != d) {
        return contract("feature vectors must be nonempty and of equal length");
    }
    let mut mu = vec![0.0; d];
    for f in features {
        mu.iter_mut().zip(f).for_each(|(m, v)| *m += v);
    }
    mu.iter_mut().for_each(|m| *m /= n as f64);
    let centered = DMatrix::from_fn(n, d, |i, j| features[i][j] - mu[j]);
    let mut cov = centered.transpose() * &centered / (n - 1) as f64;
    cov = (&cov + cov.transpose()) * 0.5;
    for i in 0..d {
        cov[(i, i)] += reg_eps;
    }
    let sigma = (0..d).flat_map(|i| (0..d).map(move |j| (i, j))).map(|(i, j)| cov[(i, j)]).collect();
    Ok(FeatureStats { mu, sigma, sample_count: n })
}

/// Statistics of the classifier's global features over `clouds`.
pub fn feature_stats(model: &ClassifierModel, clouds: &[&PointCloud], reg_eps: f64) -> Result<FeatureStats> {
    if clouds.len() < 2 {
        return contract(format!("feature statistics need at least 2 clouds, got {}", clouds.len()));
    }
    feature_stats_from_features(&model.global_features(clouds)?, reg_eps)
}

fn psd_sqrt(m: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(m);
    if eig.eigenvalues.iter().any(|v| !v.is_finite()) {
        return numeric("non-finite eigenvalue in covariance square root");
    }
    let roots = DVector::from_iterator(eig.eigenvalues.len(), eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()));
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// `‖μa − μb‖² + Tr(σa + σb − 2 (σa^½ σb σa^½)^½)`, clamped to ≥ 0. Square
/// roots come from eigendecompositions with negative eigenvalues clamped.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    let d = a.dim();
    if b.dim() != d || a.sigma.len() != d * d || b.sigma.len() != d * d {
        return contract(format!("feature dimensions differ: {d} vs {}", b.dim()));
    }
    let sa = DMatrix::from_row_slice(d, d, &a.sigma);
    let sb = DMatrix::from_row_slice(d, d, &b.sigma);
    // Tr((σa^½ σb σa^½)^½) is the nuclear norm of σa^½ σb^½; the singular
    // values keep near-singular covariances accurate
    let ra = psd_sqrt(sa.clone())?;
    let rb = psd_sqrt(sb.clone())?;
    let singular = (&ra * &rb).singular_values();
    if singular.iter().any(|v| !v.is_finite()) {
        return numeric("non-finite singular value in Fréchet distance");
    }
    let tr_sqrt: f64 = singular.iter().sum();
    let mean_term: f64 = a.mu.iter().zip(&b.mu).map(|(x, y)| (x - y) * (x - y)).sum();
    let fid = mean_term + sa.trace() + sb.trace() - 2.0 * tr_sqrt;
    if !fid.is_finite() {
        return numeric("non-finite Fréchet distance");
    }
    Ok(fid.max(0.0))
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&a, &b)| {
            let (a, b) = (a.max(PROB_FLOOR), b.max(PROB_FLOOR));
            a * (a / b).ln()
        })
        .sum()
}

/// `exp` of the mean KL divergence between the prediction rows of one
/// class's generated samples, over ordered pairs (diagonal included unless
/// `exclude_diagonal`).
pub fn modified_is(rows: &[Vec<f64>], exclude_diagonal: bool) -> Result<f64> {
    if rows.is_empty() {
        return contract("modified inception score of zero rows");
    }
    let k = rows[0].len();
    for (i, r) in rows.iter().enumerate() {
        let s: f64 = r.iter().sum();
        if r.len() != k || (s - 1.0).abs() > 1e-6 || r.iter().any(|p| !(*p >= 0.0)) {
            return contract(format!("row {i} is not a probability vector (sum {s})"));
        }
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, p) in rows.iter().enumerate() {
        for (j, q) in rows.iter().enumerate() {
            if exclude_diagonal && i == j {
                continue;
            }
            total += kl(p, q);
            count += 1;
        }
    }
    if count == 0 {
        return Ok(1.0);
    }
    Ok((total / count as f64).exp())
}

/// `m_is − (ln fid + ln cd) / 2`.
pub fn pc_ams(m_is: f64, fid: f64, cd: f64) -> Result<f64> {
    if !(fid > 0.0) || !(cd > 0.0) {
        return contract(format!("PC-AMS needs positive FID and CD, got {fid} and {cd}"));
    }
    Ok(m_is - (fid.ln() + cd.ln()) / 2.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub k_refs: usize,
    pub seed: u64,
    pub reg_eps: f64,
    /// EMD is the slow part; it can be skipped.
    pub emd: bool,
    pub exclude_diagonal: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { k_refs: 5, seed: 0, reg_eps: DEFAULT_REG_EPS, emd: true, exclude_diagonal: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: usize,
    pub name: String,
    pub m_is: f64,
    pub fid: f64,
    pub cd: f64,
    pub emd: Option<f64>,
    pub pc_ams: f64,
    /// FID or CD hit the log floor: the generated set copies the references.
    pub degenerate_copy: bool,
    pub generated_count: usize,
    pub reference_ids: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub m_is: f64,
    pub fid: f64,
    pub cd: f64,
    pub emd: Option<f64>,
    /// Computed from the aggregated `m_is`, `fid` and `cd`.
    pub pc_ams: f64,
    /// Other reading of m-IS: within-class KL terms pooled over all classes
    /// before exponentiating. Reported only; `m_is` above feeds PC-AMS.
    pub m_is_pooled: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub schema_version: u32,
    pub config: EvalConfig,
    pub classes: Vec<ClassMetrics>,
    pub aggregate: AggregateMetrics,
}

/// `pc_ams` with FID and CD floored at [`LOG_FLOOR`].
pub fn pc_ams_floored(m_is: f64, fid: f64, cd: f64) -> f64 {
    m_is - (fid.max(LOG_FLOOR).ln() + cd.max(LOG_FLOOR).ln()) / 2.0
}

impl MetricReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_csv(&self) -> String {
        let fmt_emd = |e: Option<f64>| e.map_or_else(String::new, |v| format!("{v}"));
        let mut s = String::from("class,m_is,fid,cd,emd,pc_ams\n");
        for c in &self.classes {
            s.push_str(&format!("{},{},{},{},{},{}\n", c.name, c.m_is, c.fid, c.cd, fmt_emd(c.emd), c.pc_ams));
        }
        let a = &self.aggregate;
        s.push_str(&format!("aggregate,{},{},{},{},{}\n", a.m_is, a.fid, a.cd, fmt_emd(a.emd), a.pc_ams));
        s
    }
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n.max(1) as f64
}

/// Scores AM outputs; `generated[label]` holds the outputs for class `label`.
pub fn evaluate_am_set(
    model: &ClassifierModel,
    generated: &[Vec<PointCloud>],
    split: &DatasetSplit,
    config: &EvalConfig,
) -> Result<MetricReport> {
    if generated.is_empty() || generated.len() > split.class_count() {
        return contract(format!("{} generated classes for a {}-class dataset", generated.len(), split.class_count()));
    }
    let mut classes = Vec::with_capacity(generated.len());
    for (label, gen) in generated.iter().enumerate() {
        if gen.is_empty() {
            return contract(format!("no generated samples for class {}", split.class_names[label]));
        }
        let gen_refs: Vec<&PointCloud> = gen.iter().collect();
        let rows: Vec<Vec<f64>> = model.forward_batch(&gen_refs)?.into_iter().map(|b| b.probs).collect();
        let m_is = modified_is(&rows, config.exclude_diagonal)?;

        let pool: Vec<_> = split.test_of_class(label).collect();
        if pool.len() < config.k_refs.max(2) {
            return contract(format!("class {} has only {} test instances", split.class_names[label], pool.len()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, label as u64));
        let picked: Vec<_> = index::sample(&mut rng, pool.len(), config.k_refs).into_iter().map(|i| pool[i]).collect();
        let refs: Vec<&PointCloud> = picked.iter().map(|c| &c.cloud).collect();

        let fid = if gen.len() >= 2 {
            let gs = feature_stats(model, &gen_refs, config.reg_eps)?;
            let rs = feature_stats(model, &refs, config.reg_eps)?;
            frechet_distance(&gs, &rs)?
        } else {
            return contract(format!("class {} needs at least 2 generated samples for FID", split.class_names[label]));
        };
        let mut cds = Vec::new();
        let mut emds = Vec::new();
        for g in gen {
            for r in &refs {
                cds.push(chamfer(g, r)?);
                if config.emd {
                    emds.push(emd_exact(g, r)?);
                }
            }
        }
        let cd = mean(cds);
        classes.push(ClassMetrics {
            label,
            name: split.class_names[label].clone(),
            m_is,
            fid,
            cd,
            emd: config.emd.then(|| mean(emds)),
            pc_ams: pc_ams_floored(m_is, fid, cd),
            degenerate_copy: fid < LOG_FLOOR || cd < LOG_FLOOR,
            generated_count: gen.len(),
            reference_ids: picked.iter().map(|c| c.instance_id).collect(),
        });
    }
    let m_is = mean(classes.iter().map(|c| c.m_is));
    let fid = mean(classes.iter().map(|c| c.fid));
    let cd = mean(classes.iter().map(|c| c.cd));
    let emd = config.emd.then(|| mean(classes.iter().filter_map(|c| c.emd)));
    let pairs = |n: usize| if config.exclude_diagonal { n * (n - 1) } else { n * n } as f64;
    let weight: f64 = classes.iter().map(|c| pairs(c.generated_count)).sum();
    let m_is_pooled = if weight > 0.0 {
        (classes.iter().map(|c| pairs(c.generated_count) * c.m_is.ln()).sum::<f64>() / weight).exp()
    } else {
        m_is
    };
    let aggregate = AggregateMetrics { m_is, fid, cd, emd, pc_ams: pc_ams_floored(m_is, fid, cd), m_is_pooled };
    Ok(MetricReport { schema_version: 1, config: config.clone(), classes, aggregate })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub n_per_step: usize,
    pub max_radius: f64,
    pub max_sigma: f64,
    pub reg_eps: f64,
    pub emd: bool,
    pub seed: u64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self { steps: 10, n_per_step: 10, max_radius: 1.0, max_sigma: 0.1, reg_eps: DEFAULT_REG_EPS, emd: true, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distribution {
    Uniform,
    Gaussian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionRow {
    pub distribution: Distribution,
    /// Cube half-width `r` for uniform clouds, `σ` for Gaussian ones.
    pub parameter: f64,
    pub class: usize,
    pub fid: f64,
    pub cd: f64,
    pub emd: Option<f64>,
    pub fid_ic: f64,
    pub cd_ic: f64,
    pub emd_ic: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionTable {
    pub config: DiffusionConfig,
    pub rows: Vec<DiffusionRow>,
}

impl DiffusionTable {
    pub fn to_csv(&self) -> String {
        let o = |e: Option<f64>| e.map_or_else(String::new, |v| format!("{v}"));
        let mut s = String::from("distribution,parameter,fid,cd,emd,fid_ic,cd_ic,emd_ic\n");
        for r in &self.rows {
            let dist = match r.distribution {
                Distribution::Uniform => "uniform",
                Distribution::Gaussian => "gaussian",
            };
            s.push_str(&format!(
                "{dist},{},{},{},{},{},{},{}\n",
                r.parameter,
                r.fid,
                r.cd,
                o(r.emd),
                r.fid_ic,
                r.cd_ic,
                o(r.emd_ic)
            ));
        }
        s
    }

    pub fn of(&self, distribution: Distribution) -> impl Iterator<Item = &DiffusionRow> {
        self.rows.iter().filter(move |r| r.distribution == distribution)
    }
}

fn paired_mean(a: &[&PointCloud], b: &[&PointCloud], f: fn(&PointCloud, &PointCloud) -> Result<f64>) -> Result<f64> {
    let mut total = 0.0;
    for (x, y) in a.iter().zip(b) {
        total += f(x, y)?;
    }
    Ok(total / a.len() as f64)
}

fn linspace(hi: f64, steps: usize) -> Vec<f64> {
    if steps == 1 {
        return vec![0.0];
    }
    (0..steps).map(|i| hi * i as f64 / (steps - 1) as f64).collect()
}

/// FID/CD/EMD of random clouds of growing spread against real objects, next
/// to the same metrics between two disjoint draws of real objects.
///
/// Each row picks a random class; its references and intra-class baseline
/// come from that class's pooled train and test instances. CD and EMD pair
/// the i-th random cloud with the i-th reference; CD runs from the real
/// points to the random cloud, so an all-origin cloud scores the mean norm of
/// the real points.
pub fn diffusion_study(model: &ClassifierModel, split: &DatasetSplit, config: &DiffusionConfig) -> Result<DiffusionTable> {
    let n = config.n_per_step;
    if config.steps == 0 || n < 2 {
        return contract("diffusion study needs steps ≥ 1 and n_per_step ≥ 2");
    }
    let points = split.points_per_cloud().ok_or_else(|| crate::Error::Contract("empty dataset".into()))?;
    let pools: Vec<Vec<&PointCloud>> = (0..split.class_count())
        .map(|c| split.train_of_class(c).chain(split.test_of_class(c)).map(|x| &x.cloud).collect())
        .collect();
    if let Some(c) = pools.iter().position(|p| p.len() < 2 * n) {
        return contract(format!("class {} has {} instances, {} needed", split.class_names[c], pools[c].len(), 2 * n));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut rows = Vec::new();
    for (distribution, hi) in [(Distribution::Uniform, config.max_radius), (Distribution::Gaussian, config.max_sigma)] {
        for parameter in linspace(hi, config.steps) {
            let class = rng.random_range(0..pools.len());
            let mut pool = pools[class].clone();
            pool.shuffle(&mut rng);
            let (refs, other) = (&pool[..n], &pool[n..2 * n]);
            let randoms = (0..n)
                .map(|_| {
                    let s = rng.random();
                    match distribution {
                        Distribution::Uniform => random_cloud_uniform(parameter, points, s),
                        Distribution::Gaussian => random_cloud_gaussian(parameter, points, s),
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            let rand_refs: Vec<&PointCloud> = randoms.iter().collect();
            let ref_stats = feature_stats(model, refs, config.reg_eps)?;
            let fid = frechet_distance(&feature_stats(model, &rand_refs, config.reg_eps)?, &ref_stats)?;
            let fid_ic = frechet_distance(&feature_stats(model, other, config.reg_eps)?, &ref_stats)?;
            rows.push(DiffusionRow {
                distribution,
                parameter,
                class,
                fid,
                cd: paired_mean(refs, &rand_refs, chamfer)?,
                emd: if config.emd { Some(paired_mean(&rand_refs, refs, emd_exact)?) } else { None },
                fid_ic,
                cd_ic: paired_mean(refs, other, chamfer)?,
                emd_ic: if config.emd { Some(paired_mean(other, refs, emd_exact)?) } else { None },
            });
        }
    }
    Ok(DiffusionTable { config: config.clone(), rows })
}
