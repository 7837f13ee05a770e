//! Market-basket clustering: binary product×customer matrix, cosine
//! similarities, a diagonal Gaussian mixture fitted by EM, and conversion of
//! cluster archetypes into bay-visit journeys.

use std::collections::{BTreeMap, BTreeSet};
use std::io::BufRead;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::layout::StoreLayout;

/// Absolute variance floor for mixture components.
pub const VARIANCE_FLOOR: f64 = 1e-6;
pub const DEFAULT_FLOOR_RATIO: f64 = 0.5;
pub const DEFAULT_ARCHETYPE_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum BasketError {
    #[error("customer {0} has an empty basket")]
    EmptyBasket(String),
    #[error("unknown product {product} in basket of customer {customer}")]
    UnknownProduct { customer: String, product: String },
    #[error("no transactions")]
    NoTransactions,
    #[error("cosine similarity is undefined for a zero vector")]
    ZeroVector,
    #[error("vectors have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("cluster count {k} must be between 1 and the number of customers ({n})")]
    ClusterCount { k: usize, n: usize },
    #[error("max_iter must be at least 1")]
    MaxIter,
    #[error("empty k range")]
    EmptyRange,
    #[error("product {0} is not stocked in any bay")]
    ProductWithoutBay(String),
    #[error("transactions file not found: {0}")]
    NotFound(String),
    #[error("malformed transactions line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transaction {
    pub customer: String,
    pub products: Vec<String>,
}

/// Reads `customer_id,product_id` CSV (optional header) or, for `.jsonl` /
/// `.json` files, one `{"customer","products":[...]}` object per line.
pub fn read_transactions(path: impl AsRef<Path>) -> Result<Vec<Transaction>, BasketError> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(BasketError::NotFound(path.display().to_string()));
    }
    let is_json = matches!(
        path.extension().and_then(|e| e.to_str()),
        Some("jsonl") | Some("json")
    );
    if is_json {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut out = Vec::new();
        for (i, line) in file.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let t: Transaction = serde_json::from_str(&line).map_err(|e| BasketError::Malformed {
                line: i + 1,
                msg: e.to_string(),
            })?;
            out.push(t);
        }
        return Ok(out);
    }

    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut grouped: BTreeMap<String, Vec<String>> = BTreeMap::new();
    let mut order = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        if rec.len() != 2 {
            return Err(BasketError::Malformed {
                line: i + 1,
                msg: format!("expected 2 fields, found {}", rec.len()),
            });
        }
        if i == 0 && &rec[0] == "customer_id" && &rec[1] == "product_id" {
            continue;
        }
        let entry = grouped.entry(rec[0].to_owned()).or_insert_with(|| {
            order.push(rec[0].to_owned());
            Vec::new()
        });
        entry.push(rec[1].to_owned());
    }
    Ok(order
        .into_iter()
        .map(|c| {
            let products = grouped.remove(&c).unwrap_or_default();
            Transaction { customer: c, products }
        })
        .collect())
}

/// Binary product×customer incidence matrix, stored column-wise as the
/// sorted product indices of each customer's basket.
#[derive(Debug, Clone, PartialEq)]
pub struct BasketMatrix {
    products: Vec<String>,
    customers: Vec<String>,
    baskets: Vec<Vec<usize>>,
}

impl BasketMatrix {
    pub fn products(&self) -> &[String] {
        &self.products
    }

    pub fn customers(&self) -> &[String] {
        &self.customers
    }

    /// Product indices in customer `j`'s basket.
    pub fn basket(&self, j: usize) -> &[usize] {
        &self.baskets[j]
    }

    pub fn cell(&self, product: usize, customer: usize) -> u8 {
        u8::from(self.baskets[customer].binary_search(&product).is_ok())
    }

    pub fn rows(&self) -> usize {
        self.products.len()
    }

    pub fn cols(&self) -> usize {
        self.customers.len()
    }

    /// Dense `m × n` copy, row-major by product.
    pub fn dense(&self) -> Vec<Vec<u8>> {
        (0..self.rows())
            .map(|i| (0..self.cols()).map(|j| self.cell(i, j)).collect())
            .collect()
    }

    pub fn column(&self, j: usize) -> Vec<u8> {
        let mut col = vec![0u8; self.rows()];
        for &i in &self.baskets[j] {
            col[i] = 1;
        }
        col
    }

    pub fn column_sums(&self) -> Vec<usize> {
        self.baskets.iter().map(Vec::len).collect()
    }
}

/// Builds the basket matrix with rows and columns in sorted id order.
///
/// With a catalog, rows cover the whole catalog and any product outside it is
/// an error; without one, rows are the products that occur. Repeated
/// customer ids are merged.
pub fn build_matrix(
    transactions: &[Transaction],
    catalog: Option<&BTreeSet<String>>,
) -> Result<BasketMatrix, BasketError> {
    if transactions.is_empty() {
        return Err(BasketError::NoTransactions);
    }
    let mut per_customer: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for t in transactions {
        let set = per_customer.entry(t.customer.as_str()).or_default();
        for p in &t.products {
            if let Some(cat) = catalog {
                if !cat.contains(p) {
                    return Err(BasketError::UnknownProduct {
                        customer: t.customer.clone(),
                        product: p.clone(),
                    });
                }
            }
            set.insert(p.as_str());
        }
    }
    if let Some((c, _)) = per_customer.iter().find(|(_, s)| s.is_empty()) {
        return Err(BasketError::EmptyBasket((*c).to_owned()));
    }
    let products: Vec<String> = match catalog {
        Some(cat) => cat.iter().cloned().collect(),
        None => per_customer
            .values()
            .flatten()
            .copied()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .map(str::to_owned)
            .collect(),
    };
    let index: BTreeMap<&str, usize> = products
        .iter()
        .enumerate()
        .map(|(i, p)| (p.as_str(), i))
        .collect();
    let customers = per_customer.keys().map(|c| (*c).to_owned()).collect();
    let baskets = per_customer
        .values()
        .map(|set| set.iter().map(|p| index[p]).collect())
        .collect();
    Ok(BasketMatrix {
        products,
        customers,
        baskets,
    })
}

/// `Σuᵢvᵢ / (‖u‖·‖v‖)` for binary vectors.
pub fn cosine(u: &[u8], v: &[u8]) -> Result<f64, BasketError> {
    if u.len() != v.len() {
        return Err(BasketError::LengthMismatch(u.len(), v.len()));
    }
    let dot: f64 = u.iter().zip(v).map(|(&a, &b)| f64::from(a) * f64::from(b)).sum();
    let nu: f64 = u.iter().map(|&a| f64::from(a) * f64::from(a)).sum::<f64>().sqrt();
    let nv: f64 = v.iter().map(|&b| f64::from(b) * f64::from(b)).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(BasketError::ZeroVector);
    }
    Ok(dot / (nu * nv))
}

// cosine of two sorted index sets
fn set_cosine(a: &[usize], b: &[usize]) -> f64 {
    let (mut i, mut j, mut common) = (0, 0, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                common += 1;
                i += 1;
                j += 1;
            }
        }
    }
    (common as f64 / ((a.len() * b.len()) as f64).sqrt()).clamp(0.0, 1.0)
}

/// Symmetric customer×customer cosine matrix with unit diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn from_baskets(m: &BasketMatrix) -> Self {
        let n = m.cols();
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
            for j in (i + 1)..n {
                let s = set_cosine(m.basket(i), m.basket(j));
                data[i * n + j] = s;
                data[j * n + i] = s;
            }
        }
        Self { n, data }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    /// Each customer is its row of cosine scores.
    #[default]
    Similarity,
    /// Each customer is its raw binary basket vector.
    Raw,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub k: usize,
    pub seed: u64,
    pub max_iter: usize,
    pub tol: f64,
    pub features: FeatureMode,
    pub archetype_threshold: f64,
    /// Per-feature variance floor as a fraction of that feature's variance
    /// over all customers. Keeps components from collapsing onto groups of
    /// identical baskets.
    #[serde(default = "default_floor_ratio")]
    pub variance_floor_ratio: f64,
}

fn default_floor_ratio() -> f64 {
    DEFAULT_FLOOR_RATIO
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            k: 2,
            seed: 0,
            max_iter: 200,
            tol: 1e-6,
            features: FeatureMode::Similarity,
            archetype_threshold: DEFAULT_ARCHETYPE_THRESHOLD,
            variance_floor_ratio: DEFAULT_FLOOR_RATIO,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryCluster {
    pub id: usize,
    /// Fraction of customers hard-assigned to this cluster.
    pub weight: f64,
    pub archetype_products: BTreeSet<String>,
    /// Filled by [`to_bay_sequence`] once a layout is known.
    #[serde(default)]
    pub bay_sequence: Vec<String>,
    pub member_customers: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterResult {
    pub clusters: Vec<TrajectoryCluster>,
    pub log_likelihood_trace: Vec<f64>,
    pub log_likelihood: f64,
    pub bic: f64,
    /// Hard assignment per customer (column order of the matrix).
    pub assignments: Vec<usize>,
    /// Soft responsibilities, `n × k`.
    pub responsibilities: Vec<Vec<f64>>,
}

fn features(m: &BasketMatrix, mode: FeatureMode) -> Vec<Vec<f64>> {
    match mode {
        FeatureMode::Similarity => {
            let s = SimilarityMatrix::from_baskets(m);
            (0..s.len()).map(|i| s.row(i).to_vec()).collect()
        }
        FeatureMode::Raw => (0..m.cols())
            .map(|j| m.column(j).into_iter().map(f64::from).collect())
            .collect(),
    }
}

/// Fits a `k`-component diagonal Gaussian mixture to the customers by EM.
pub fn cluster(m: &BasketMatrix, cfg: &ClusterConfig) -> Result<ClusterResult, BasketError> {
    let n = m.cols();
    if cfg.k == 0 || cfg.k > n {
        return Err(BasketError::ClusterCount { k: cfg.k, n });
    }
    if cfg.max_iter == 0 {
        return Err(BasketError::MaxIter);
    }
    let x = features(m, cfg.features);
    let fit = DiagonalGmm::fit(&x, cfg.k, cfg.seed, cfg.max_iter, cfg.tol, cfg.variance_floor_ratio);

    let assignments: Vec<usize> = fit
        .responsibilities
        .iter()
        .map(|r| {
            let mut best = 0;
            for j in 1..r.len() {
                if r[j] > r[best] {
                    best = j;
                }
            }
            best
        })
        .collect();

    let clusters = (0..cfg.k)
        .map(|c| {
            let members: Vec<usize> = (0..n).filter(|&i| assignments[i] == c).collect();
            let mass: f64 = fit.responsibilities.iter().map(|r| r[c]).sum();
            let archetype_products = if mass > 0.0 {
                let mut freq = vec![0.0; m.rows()];
                for (i, r) in fit.responsibilities.iter().enumerate() {
                    for &p in m.basket(i) {
                        freq[p] += r[c];
                    }
                }
                freq.iter()
                    .enumerate()
                    .filter(|(_, &f)| f / mass >= cfg.archetype_threshold)
                    .map(|(p, _)| m.products()[p].clone())
                    .collect()
            } else {
                BTreeSet::new()
            };
            TrajectoryCluster {
                id: c,
                weight: members.len() as f64 / n as f64,
                archetype_products,
                bay_sequence: Vec::new(),
                member_customers: members.iter().map(|&i| m.customers()[i].clone()).collect(),
            }
        })
        .collect();

    let d = x.first().map_or(0, Vec::len);
    let params = (cfg.k * 2 * d + cfg.k - 1) as f64;
    let bic = -2.0 * fit.log_likelihood + params * (n as f64).ln();

    Ok(ClusterResult {
        clusters,
        log_likelihood: fit.log_likelihood,
        log_likelihood_trace: fit.trace,
        bic,
        assignments,
        responsibilities: fit.responsibilities,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BicEntry {
    pub k: usize,
    pub log_likelihood: f64,
    pub bic: f64,
}

/// Picks the `k` with the lowest BIC; ties go to the smaller `k`.
pub fn select_k(
    m: &BasketMatrix,
    k_range: impl IntoIterator<Item = usize>,
    base: &ClusterConfig,
) -> Result<(usize, Vec<BicEntry>), BasketError> {
    let mut table = Vec::new();
    for k in k_range {
        let r = cluster(m, &ClusterConfig { k, ..*base })?;
        table.push(BicEntry {
            k,
            log_likelihood: r.log_likelihood,
            bic: r.bic,
        });
    }
    let best = table
        .iter()
        .min_by(|a, b| a.bic.total_cmp(&b.bic).then(a.k.cmp(&b.k)))
        .ok_or(BasketError::EmptyRange)?;
    Ok((best.k, table))
}

/// Orders the bays holding `products` as a greedy nearest-neighbour walk from
/// the spawn point, using route lengths. Ties go to the smaller bay id.
pub fn to_bay_sequence<'a>(
    products: impl IntoIterator<Item = &'a String>,
    layout: &StoreLayout,
) -> Result<Vec<String>, BasketError> {
    let mut pending = BTreeSet::new();
    for p in products {
        let bay = layout
            .bay_of_product(p)
            .ok_or_else(|| BasketError::ProductWithoutBay(p.clone()))?;
        pending.insert(bay);
    }
    let bays = layout.bays();
    let mut here = layout.spawn();
    let mut out = Vec::with_capacity(pending.len());
    while !pending.is_empty() {
        let dist = layout.distances_from(here);
        let next = *pending
            .iter()
            .min_by(|&&a, &&b| {
                let (da, db) = (dist[bays[a].node.0], dist[bays[b].node.0]);
                if (da - db).abs() <= 1e-9 {
                    bays[a].id.cmp(&bays[b].id)
                } else {
                    da.total_cmp(&db)
                }
            })
            .unwrap();
        pending.remove(&next);
        out.push(bays[next].id.clone());
        here = bays[next].node;
    }
    Ok(out)
}

/// JSON report consumed by the simulator's clustered trajectory mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub k: usize,
    pub seed: u64,
    pub features: FeatureMode,
    pub log_likelihood: f64,
    pub bic: f64,
    #[serde(default)]
    pub log_likelihood_trace: Vec<f64>,
    #[serde(default)]
    pub bic_table: Vec<BicEntry>,
    pub clusters: Vec<TrajectoryCluster>,
    #[serde(default)]
    pub responsibilities: BTreeMap<String, Vec<f64>>,
}

impl ClusterReport {
    /// Assembles a report, filling each cluster's bay sequence from `layout`.
    pub fn new(
        m: &BasketMatrix,
        cfg: &ClusterConfig,
        result: ClusterResult,
        bic_table: Vec<BicEntry>,
        layout: Option<&StoreLayout>,
    ) -> Result<Self, BasketError> {
        let mut clusters = result.clusters;
        if let Some(layout) = layout {
            for c in &mut clusters {
                c.bay_sequence = to_bay_sequence(&c.archetype_products, layout)?;
            }
        }
        Ok(Self {
            k: cfg.k,
            seed: cfg.seed,
            features: cfg.features,
            log_likelihood: result.log_likelihood,
            bic: result.bic,
            log_likelihood_trace: result.log_likelihood_trace,
            bic_table,
            clusters,
            responsibilities: m
                .customers()
                .iter()
                .cloned()
                .zip(result.responsibilities)
                .collect(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, std::io::Error> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(std::io::Error::other)
    }
}

struct GmmFit {
    log_likelihood: f64,
    trace: Vec<f64>,
    responsibilities: Vec<Vec<f64>>,
}

struct DiagonalGmm {
    floor: Vec<f64>,
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    vars: Vec<Vec<f64>>,
}

impl DiagonalGmm {
    fn fit(x: &[Vec<f64>], k: usize, seed: u64, max_iter: usize, tol: f64, rel: f64) -> GmmFit {
        let mut gmm = Self::init(x, k, seed, rel);
        let mut trace = Vec::new();
        let mut resp = vec![vec![0.0; k]; x.len()];
        for _ in 0..max_iter {
            let ll = gmm.e_step(x, &mut resp);
            let converged = trace.last().is_some_and(|&prev: &f64| ll - prev < tol);
            trace.push(ll);
            if converged {
                break;
            }
            gmm.m_step(x, &resp);
        }
        GmmFit {
            log_likelihood: *trace.last().unwrap(),
            trace,
            responsibilities: resp,
        }
    }

    // first centre drawn from the seed, the rest farthest-first
    fn init(x: &[Vec<f64>], k: usize, seed: u64, rel: f64) -> Self {
        let n = x.len();
        let d = x[0].len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut centers = vec![rng.random_range(0..n)];
        let mut nearest: Vec<f64> = x.iter().map(|p| sq_dist(p, &x[centers[0]])).collect();
        while centers.len() < k {
            let mut best = 0;
            for i in 1..n {
                if nearest[i] > nearest[best] {
                    best = i;
                }
            }
            centers.push(best);
            for (i, p) in x.iter().enumerate() {
                nearest[i] = nearest[i].min(sq_dist(p, &x[best]));
            }
        }

        let mut global_var = vec![0.0; d];
        for dim in 0..d {
            let mean = x.iter().map(|p| p[dim]).sum::<f64>() / n as f64;
            let var = x.iter().map(|p| (p[dim] - mean).powi(2)).sum::<f64>() / n as f64;
            global_var[dim] = var.max(VARIANCE_FLOOR);
        }
        let floor = global_var.iter().map(|v| (v * rel).max(VARIANCE_FLOOR)).collect();
        Self {
            floor,
            weights: vec![1.0 / k as f64; k],
            means: centers.iter().map(|&c| x[c].clone()).collect(),
            vars: vec![global_var; k],
        }
    }

    fn e_step(&self, x: &[Vec<f64>], resp: &mut [Vec<f64>]) -> f64 {
        let k = self.weights.len();
        let ln_norm: Vec<f64> = self
            .vars
            .iter()
            .map(|v| v.iter().map(|s| -0.5 * (std::f64::consts::TAU * s).ln()).sum())
            .collect();
        let mut total = 0.0;
        for (p, r) in x.iter().zip(resp.iter_mut()) {
            for j in 0..k {
                r[j] = if self.weights[j] > 0.0 {
                    let quad: f64 = p
                        .iter()
                        .zip(&self.means[j])
                        .zip(&self.vars[j])
                        .map(|((xi, mu), s)| (xi - mu) * (xi - mu) / s)
                        .sum();
                    self.weights[j].ln() + ln_norm[j] - 0.5 * quad
                } else {
                    f64::NEG_INFINITY
                };
            }
            let max = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = r.iter().map(|l| (l - max).exp()).sum();
            let lse = max + sum.ln();
            for l in r.iter_mut() {
                *l = (*l - lse).exp();
            }
            total += lse;
        }
        total
    }

    fn m_step(&mut self, x: &[Vec<f64>], resp: &[Vec<f64>]) {
        let n = x.len() as f64;
        let d = x[0].len();
        for j in 0..self.weights.len() {
            let nj: f64 = resp.iter().map(|r| r[j]).sum();
            if nj <= 1e-300 {
                self.weights[j] = 0.0;
                continue;
            }
            self.weights[j] = nj / n;
            let mut mean = vec![0.0; d];
            for (p, r) in x.iter().zip(resp) {
                if r[j] == 0.0 {
                    continue;
                }
                for (m, xi) in mean.iter_mut().zip(p) {
                    *m += r[j] * xi;
                }
            }
            mean.iter_mut().for_each(|m| *m /= nj);
            let mut var = vec![0.0; d];
            for (p, r) in x.iter().zip(resp) {
                if r[j] == 0.0 {
                    continue;
                }
                for ((v, xi), m) in var.iter_mut().zip(p).zip(&mean) {
                    *v += r[j] * (xi - m) * (xi - m);
                }
            }
            for (v, f) in var.iter_mut().zip(&self.floor) {
                *v = (*v / nj).max(*f);
            }
            self.means[j] = mean;
            self.vars[j] = var;
        }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Labeled synthetic baskets for experiments and tests: `populations[i]`
/// customers draw from their own disjoint block of `products_each` products,
/// each product kept with probability `keep` (never empty).
pub fn synthetic_populations(
    populations: &[usize],
    products_each: usize,
    keep: f64,
    seed: u64,
) -> (Vec<Transaction>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut txs = Vec::new();
    let mut labels = Vec::new();
    let mut cid = 0;
    for (pop, &count) in populations.iter().enumerate() {
        for _ in 0..count {
            let products: Vec<String> = loop {
                let chosen: Vec<String> = (0..products_each)
                    .filter(|_| rng.random_bool(keep))
                    .map(|j| format!("p{:03}", pop * products_each + j + 1))
                    .collect();
                if !chosen.is_empty() {
                    break chosen;
                }
            };
            txs.push(Transaction {
                customer: format!("c{cid:05}"),
                products,
            });
            labels.push(pop);
            cid += 1;
        }
    }
    (txs, labels)
}
