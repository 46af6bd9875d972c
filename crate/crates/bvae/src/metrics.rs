//! Evaluation side of the crate: image-sum BCE, ELBO parts, k-means plus NMI
//! for clustering quality on posterior means, and active-unit counting for
//! posterior-collapse detection.
//!
//! Protocol notes, since the choices matter for comparability: NMI uses
//! natural logs and geometric-mean normalization `I / sqrt(H_a * H_b)`;
//! clustering runs 10-means on posterior means of the full training split,
//! best of 5 seeded restarts by inertia; a latent dimension counts as active
//! when the dataset variance of its posterior mean exceeds 0.01.

use crate::graph::softplus_stable;
use crate::latent::binarized_kl;
use crate::model::VaeModel;
use crate::rng::Rng;
use crate::tensor::Tensor;
use std::fmt::Write as _;
use std::io;
use std::path::Path;
use thiserror::Error;

/// Lloyd iteration cap.
pub const KMEANS_MAX_ITER: usize = 100;
/// Convergence threshold on the largest centroid displacement.
pub const KMEANS_TOL: f64 = 1e-6;
/// Restarts tried by [`cluster_latents`].
pub const KMEANS_RESTARTS: usize = 5;
/// Variance threshold above which a latent dimension counts as active.
pub const ACTIVE_UNIT_THRESHOLD: f64 = 0.01;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("domain: {0}")]
    Domain(String),
    #[error("length mismatch: {a} vs {b}")]
    LengthMismatch { a: usize, b: usize },
}

/// Batch-mean, image-sum binary cross-entropy of Bernoulli means against
/// targets in [0, 1]. Predictions are clamped to [1e-7, 1 - 1e-7] before the
/// logs; targets outside [0, 1] or non-finite inputs are domain errors.
pub fn bce(pred: &Tensor, target: &Tensor) -> Result<f64, MetricsError> {
    if pred.shape() != target.shape() {
        return Err(MetricsError::Domain(format!(
            "shape mismatch: {:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let n = pred.rows();
    let mut total = 0.0;
    for (i, (&p, &t)) in pred.data().iter().zip(target.data()).enumerate() {
        if !(0.0..=1.0).contains(&t) {
            return Err(MetricsError::Domain(format!(
                "target[{}] = {} outside [0, 1]",
                i, t
            )));
        }
        if !(0.0..=1.0).contains(&p) {
            return Err(MetricsError::Domain(format!(
                "pred[{}] = {} outside [0, 1]",
                i, p
            )));
        }
        let p = p.clamp(1e-7, 1.0 - 1e-7);
        total -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
    }
    Ok(total / n as f64)
}

/// One converged k-means run.
pub struct KmeansFit {
    pub labels: Vec<usize>,
    pub centroids: Tensor,
    pub inertia: f64,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(point, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Lloyd's algorithm with k-means++ seeding. Ties in assignment go to the
/// lowest cluster index; a cluster left empty after an update is reseeded to
/// the point farthest from its current centroid. Deterministic per seed.
pub fn kmeans_fit(latents: &Tensor, k: usize, seed: u64, max_iter: usize) -> KmeansFit {
    let n = latents.rows();
    let d = latents.cols();
    assert!(k > 0, "kmeans: k must be positive");
    assert!(n >= k, "kmeans: {} points for {} clusters", n, k);
    let mut rng = Rng::from_seed(seed);

    // k-means++ seeding: next centroid drawn proportional to the squared
    // distance to the nearest already-chosen one.
    let mut centroids: Vec<Vec<f64>> = vec![latents.row(rng.below(n)).to_vec()];
    let mut d2: Vec<f64> = (0..n)
        .map(|i| sq_dist(latents.row(i), &centroids[0]))
        .collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.uniform() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                target -= w;
                if target <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.below(n)
        };
        centroids.push(latents.row(pick).to_vec());
        for (i, best) in d2.iter_mut().enumerate() {
            let dist = sq_dist(latents.row(i), centroids.last().unwrap());
            if dist < *best {
                *best = dist;
            }
        }
    }

    let mut labels = vec![0usize; n];
    let mut iterations = 0;
    for _ in 0..max_iter {
        iterations += 1;
        for (i, label) in labels.iter_mut().enumerate() {
            *label = nearest(latents.row(i), &centroids).0;
        }
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[labels[i]] += 1;
            for (s, &x) in sums[labels[i]].iter_mut().zip(latents.row(i)) {
                *s += x;
            }
        }
        let mut movement: f64 = 0.0;
        let mut reseeded = vec![false; n];
        for c in 0..k {
            let new = if counts[c] > 0 {
                sums[c].iter().map(|s| s / counts[c] as f64).collect()
            } else {
                // Reseed an empty cluster to the farthest unclaimed point.
                let far = (0..n)
                    .filter(|&i| !reseeded[i])
                    .max_by(|&a, &b| {
                        let da = sq_dist(latents.row(a), &centroids[labels[a]]);
                        let db = sq_dist(latents.row(b), &centroids[labels[b]]);
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                reseeded[far] = true;
                latents.row(far).to_vec()
            };
            movement = movement.max(sq_dist(&centroids[c], &new).sqrt());
            centroids[c] = new;
        }
        if movement < KMEANS_TOL {
            break;
        }
    }

    let mut inertia = 0.0;
    for (i, label) in labels.iter_mut().enumerate() {
        let (c, dist) = nearest(latents.row(i), &centroids);
        *label = c;
        inertia += dist;
    }
    let centroids = Tensor::from_vec(&[k, d], centroids.concat());
    KmeansFit {
        labels,
        centroids,
        inertia,
        iterations,
    }
}

/// Cluster assignments only; see [`kmeans_fit`].
pub fn kmeans(latents: &Tensor, k: usize, seed: u64, max_iter: usize) -> Vec<usize> {
    kmeans_fit(latents, k, seed, max_iter).labels
}

/// Best of [`KMEANS_RESTARTS`] seeded k-means runs by inertia (first wins a
/// tie). The standard protocol here is k = 10 on posterior means.
pub fn cluster_latents(latents: &Tensor, k: usize, seed: u64) -> KmeansFit {
    let mut best: Option<KmeansFit> = None;
    for i in 0..KMEANS_RESTARTS {
        let child = Rng::derive(seed, &format!("kmeans-restart-{}", i)).next_u64();
        let fit = kmeans_fit(latents, k, child, KMEANS_MAX_ITER);
        if best.as_ref().is_none_or(|b| fit.inertia < b.inertia) {
            best = Some(fit);
        }
    }
    best.unwrap()
}

/// Co-occurrence counts between two labelings over the same items.
pub struct Contingency {
    counts: Vec<Vec<usize>>,
    total: usize,
}

impl Contingency {
    pub fn from_labels(a: &[usize], b: &[usize]) -> Result<Contingency, MetricsError> {
        if a.len() != b.len() {
            return Err(MetricsError::LengthMismatch {
                a: a.len(),
                b: b.len(),
            });
        }
        let ka = a.iter().max().map_or(0, |m| m + 1);
        let kb = b.iter().max().map_or(0, |m| m + 1);
        let mut counts = vec![vec![0usize; kb]; ka];
        for (&x, &y) in a.iter().zip(b) {
            counts[x][y] += 1;
        }
        Ok(Contingency {
            counts,
            total: a.len(),
        })
    }

    pub fn counts(&self) -> &[Vec<usize>] {
        &self.counts
    }

    pub fn total(&self) -> usize {
        self.total
    }

    fn entropy(marginal: &[usize], total: f64) -> f64 {
        marginal
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / total;
                -p * p.ln()
            })
            .sum()
    }

    /// (I(a; b), H(a), H(b)) in nats.
    pub fn information(&self) -> (f64, f64, f64) {
        let total = self.total as f64;
        let kb = self.counts.first().map_or(0, Vec::len);
        let row_sums: Vec<usize> = self.counts.iter().map(|r| r.iter().sum()).collect();
        let col_sums: Vec<usize> = (0..kb)
            .map(|j| self.counts.iter().map(|r| r[j]).sum())
            .collect();
        let mut mi = 0.0;
        for (row, &rs) in self.counts.iter().zip(&row_sums) {
            for (&c, &cs) in row.iter().zip(&col_sums) {
                if c > 0 {
                    let p = c as f64 / total;
                    mi += p * (p / (rs as f64 / total * (cs as f64 / total))).ln();
                }
            }
        }
        (
            mi,
            Contingency::entropy(&row_sums, total),
            Contingency::entropy(&col_sums, total),
        )
    }
}

/// Normalized mutual information `I / sqrt(H_a * H_b)` in [0, 1], natural
/// logs. Either labeling having zero entropy yields 0 (the 0/0 convention).
pub fn nmi(a: &[usize], b: &[usize]) -> Result<f64, MetricsError> {
    let cont = Contingency::from_labels(a, b)?;
    if cont.total() == 0 {
        return Ok(0.0);
    }
    let (mi, ha, hb) = cont.information();
    if ha == 0.0 || hb == 0.0 {
        return Ok(0.0);
    }
    // I <= sqrt(H_a H_b) holds exactly; the clamp only strips float residue.
    Ok((mi / (ha * hb).sqrt()).clamp(0.0, 1.0))
}

/// Widens class labels for [`nmi`].
pub fn labels_to_usize(labels: &[u8]) -> Vec<usize> {
    labels.iter().map(|&l| l as usize).collect()
}

/// Active-unit count and per-dimension variance of rows of `mu_q` `[n, d]`.
/// Dimension j is active iff its population variance exceeds `threshold`.
pub fn active_units(mu_q: &Tensor, threshold: f64) -> (usize, Vec<f64>) {
    let n = mu_q.rows();
    let d = mu_q.cols();
    assert!(n > 0, "active_units: empty posterior set");
    let mut means = vec![0.0; d];
    for i in 0..n {
        for (m, &x) in means.iter_mut().zip(mu_q.row(i)) {
            *m += x;
        }
    }
    for m in &mut means {
        *m /= n as f64;
    }
    let mut vars = vec![0.0; d];
    for i in 0..n {
        for j in 0..d {
            let dev = mu_q.row(i)[j] - means[j];
            vars[j] += dev * dev;
        }
    }
    for v in &mut vars {
        *v /= n as f64;
    }
    let count = vars.iter().filter(|&&v| v > threshold).count();
    (count, vars)
}

/// [`active_units`] on the posterior means of `images` under `model`.
pub fn active_units_for(model: &VaeModel, images: &Tensor, threshold: f64) -> (usize, Vec<f64>) {
    let post = model.encode_dataset(images, 256);
    active_units(&post.mu_q, threshold)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElboReport {
    pub recon: f64,
    pub kl: f64,
    pub elbo: f64,
}

/// Dataset-mean reconstruction BCE (single posterior sample per datum, batch
/// order of `rng` draws pinned) and KL term, with `elbo = -(recon + kl)`.
pub fn elbo_report(model: &VaeModel, images: &Tensor, rng: &mut Rng) -> ElboReport {
    let n = images.rows();
    assert!(n > 0, "elbo_report: empty dataset");
    let d = model.latent_dim();
    let (mut recon_sum, mut kl_sum) = (0.0, 0.0);
    let mut i = 0;
    while i < n {
        let hi = (i + 256).min(n);
        let rows = hi - i;
        let mut chunk = Vec::with_capacity(rows * images.cols());
        for r in i..hi {
            chunk.extend_from_slice(images.row(r));
        }
        let x = Tensor::from_vec(&[rows, images.cols()], chunk);
        let post = model.encode(&x);
        let eps = rng.normal_tensor(&[rows, d]);
        let z = post.mu_q.add(&post.sigma_q().mul(&eps));
        let logits = model.decode_logits(&z);
        for (&l, &t) in logits.data().iter().zip(x.data()) {
            recon_sum += softplus_stable(l) - t * l;
        }
        kl_sum += binarized_kl(&post, model.effective_prior()).sum();
        i = hi;
    }
    let recon = recon_sum / n as f64;
    let kl = kl_sum / n as f64;
    ElboReport {
        recon,
        kl,
        elbo: -(recon + kl),
    }
}

/// One `metrics.csv` row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub recon_bce: f64,
    pub kl: f64,
    pub elbo: f64,
    pub nmi: f64,
    pub active_units: usize,
    pub seconds: f64,
}

pub const METRICS_HEADER: &str = "epoch,recon_bce,kl,elbo,nmi,active_units,seconds";

/// CSV text for the epoch log: pinned header, LF endings, shortest
/// round-trip float formatting so equal values produce equal bytes. Wall
/// seconds get 3 decimals and are the one column excluded from
/// reproducibility comparisons.
pub fn format_metrics_csv(rows: &[EpochRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{:.3}",
            r.epoch, r.recon_bce, r.kl, r.elbo, r.nmi, r.active_units, r.seconds
        );
    }
    out
}

pub fn write_metrics_csv(path: &Path, rows: &[EpochRow]) -> io::Result<()> {
    std::fs::write(path, format_metrics_csv(rows))
}
