//! Drift quantification for a personalized checkpoint against its teacher:
//! parameter distance, accumulated output distance on a fixed probe set,
//! sample-based KL estimation, per-class mode coverage, and the
//! KL-vs-parameter-distance bound check.

use crate::csvfmt::{format_float, parse_float};
use crate::datagen::{pentagon_mean, DEFAULT_RADIUS, NEW_CLASS_ID, PENTAGON_CLASSES};
use crate::diffusion::{ancestral_sample, NoiseSchedule};
use crate::error::{Error, Result};
use crate::nn::{predict, ModelParams};
use crate::objectives::{param_distance, Norm};
use crate::rng::Rng;

pub const DEFAULT_N_EVAL: usize = 2000;
pub const DEFAULT_KNN_K: usize = 5;
pub const DEFAULT_COVERAGE_RADIUS: f64 = 1.5;
pub const DELTA_EPS_PROBE_COUNT: usize = 512;

/// Dedicated seed for the Δε probe set, so the metric is comparable across
/// runs and checkpoints.
pub const DELTA_EPS_PROBE_SEED: u64 = 0xd1f7;

const MIN_KNN_POINTS: usize = 50;
const JITTER_MAGNITUDE: f64 = 1e-9;

// ── evaluation setup ─────────────────────────────────────────────────────────

/// What to measure and against which geometry.
#[derive(Debug, Clone)]
pub struct EvalConfig {
    /// Conditional samples drawn per class and per model.
    pub n_eval: usize,
    /// Neighbor count for the KL estimator.
    pub knn_k: usize,
    /// A sample counts as covering its class within this distance of the mean.
    pub coverage_radius: f64,
    /// True means of the original classes (0..len-1).
    pub class_means: Vec<[f64; 2]>,
    /// Personalization target: (class id, true mean), if the checkpoint has one.
    pub new_class: Option<(usize, [f64; 2])>,
}

impl EvalConfig {
    /// Toy protocol: pentagon classes at radius 4, new class 5 at the origin.
    pub fn toy() -> Self {
        EvalConfig {
            n_eval: DEFAULT_N_EVAL,
            knn_k: DEFAULT_KNN_K,
            coverage_radius: DEFAULT_COVERAGE_RADIUS,
            class_means: (0..PENTAGON_CLASSES)
                .map(|k| pentagon_mean(k, DEFAULT_RADIUS))
                .collect(),
            new_class: Some((NEW_CLASS_ID, [0.0, 0.0])),
        }
    }
}

/// Drift measurements for one personalized checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftReport {
    pub lambda: f64,
    pub seed: u64,
    pub delta_theta_l2: f64,
    pub delta_theta_l1: f64,
    pub delta_eps: f64,
    /// k-NN estimate of KL(base samples || personalized samples), nats.
    pub kl_base_vs_per: f64,
    /// Fraction of class-k conditional samples within the coverage radius of
    /// class k's true mean, for each original class.
    pub coverage: Vec<f64>,
    /// Same fraction for the personalization target class (0 when absent).
    pub new_class_fit: f64,
    /// kl / delta_theta_l2, the empirical Lipschitz ratio (0 at zero distance).
    pub bound_ratio: f64,
}

impl DriftReport {
    pub fn csv_header() -> &'static str {
        "lambda,seed,method,delta_theta_l2,delta_theta_l1,delta_eps,kl,\
coverage_0,coverage_1,coverage_2,coverage_3,coverage_4,new_class_fit,bound_ratio"
    }

    /// One row in the fixed column order.
    pub fn to_csv_row(&self, method: &str) -> String {
        let mut fields = vec![
            format_float(self.lambda),
            self.seed.to_string(),
            method.to_string(),
            format_float(self.delta_theta_l2),
            format_float(self.delta_theta_l1),
            format_float(self.delta_eps),
            format_float(self.kl_base_vs_per),
        ];
        for k in 0..5 {
            fields.push(format_float(self.coverage.get(k).copied().unwrap_or(0.0)));
        }
        fields.push(format_float(self.new_class_fit));
        fields.push(format_float(self.bound_ratio));
        fields.join(",")
    }

    /// Parses a row written by `to_csv_row`; returns the method tag too.
    pub fn from_csv_row(line: &str) -> Result<(String, DriftReport)> {
        let fields: Vec<&str> = line.trim().split(',').collect();
        if fields.len() != 14 {
            return Err(Error::Input(format!(
                "drift report row has {} fields, expected 14",
                fields.len()
            )));
        }
        let report = DriftReport {
            lambda: parse_float(fields[0])?,
            seed: fields[1]
                .parse()
                .map_err(|_| Error::Input(format!("bad seed '{}'", fields[1])))?,
            delta_theta_l2: parse_float(fields[3])?,
            delta_theta_l1: parse_float(fields[4])?,
            delta_eps: parse_float(fields[5])?,
            kl_base_vs_per: parse_float(fields[6])?,
            coverage: fields[7..12]
                .iter()
                .map(|f| parse_float(f))
                .collect::<Result<Vec<f64>>>()?,
            new_class_fit: parse_float(fields[12])?,
            bound_ratio: parse_float(fields[13])?,
        };
        Ok((fields[2].to_string(), report))
    }
}

// ── output distance on a fixed probe set ─────────────────────────────────────

/// Probe triples (x, t, c): x ~ N(0, 9I), t uniform over timesteps, c uniform
/// over the original classes, all from a dedicated seed.
pub fn delta_eps_probes(
    timesteps: usize,
    num_classes: usize,
    n: usize,
    seed: u64,
) -> Vec<([f64; 2], usize, usize)> {
    let mut rng = Rng::for_phase(seed, "delta-eps-probes");
    (0..n)
        .map(|_| {
            let x = [3.0 * rng.normal(), 3.0 * rng.normal()];
            let t = rng.below(timesteps);
            let c = rng.below(num_classes);
            (x, t, c)
        })
        .collect()
}

/// Accumulated L2 distance between the two models' noise predictions over the
/// probe set.
pub fn delta_eps(
    base: &ModelParams,
    per: &ModelParams,
    probes: &[([f64; 2], usize, usize)],
) -> Result<f64> {
    if !base.congruent(per) {
        return Err(Error::Input("delta_eps: architecture mismatch".into()));
    }
    let mut total = 0.0;
    for &(x, t, c) in probes {
        let a = predict(base, x, t, c)?;
        let b = predict(per, x, t, c)?;
        total += ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
    }
    Ok(total)
}

// ── k-NN KL estimator ────────────────────────────────────────────────────────

/// Squared distance to the k-th nearest neighbor of `point` in `set`,
/// skipping index `skip` (the query point itself when querying its own set).
fn kth_nn_sq(set: &[[f64; 2]], point: [f64; 2], k: usize, skip: Option<usize>) -> f64 {
    // `best` holds the k smallest squared distances seen, ascending.
    let mut best = vec![f64::INFINITY; k];
    for (j, q) in set.iter().enumerate() {
        if skip == Some(j) {
            continue;
        }
        let dx = point[0] - q[0];
        let dy = point[1] - q[1];
        let d2 = dx * dx + dy * dy;
        if d2 < best[k - 1] {
            let pos = best.partition_point(|&b| b < d2);
            best.insert(pos, d2);
            best.pop();
        }
    }
    best[k - 1]
}

fn knn_kl_attempt(samples_p: &[[f64; 2]], samples_q: &[[f64; 2]], k: usize) -> Option<f64> {
    let n = samples_p.len();
    let m = samples_q.len();
    let mut log_sum = 0.0;
    for (i, &x) in samples_p.iter().enumerate() {
        let rho2 = kth_nn_sq(samples_p, x, k, Some(i));
        let nu2 = kth_nn_sq(samples_q, x, k, None);
        if rho2 == 0.0 || nu2 == 0.0 {
            return None;
        }
        // (d/n) ln(nu/rho) with d = 2 collapses to ln(nu^2/rho^2)/n.
        log_sum += (nu2 / rho2).ln();
    }
    Some(log_sum / n as f64 + (m as f64 / (n - 1) as f64).ln())
}

/// k-NN divergence estimate of KL(P || Q) in nats for 2D samples:
/// `(d/n) sum_i ln(nu_k(i)/rho_k(i)) + ln(m/(n-1))` with d = 2, where rho_k is
/// the k-th NN distance within P and nu_k the k-th NN distance into Q.
///
/// Duplicate points produce zero distances; in that case both sets are
/// re-queried under deterministic uniform jitter of magnitude 1e-9, which is
/// far below the data scale.
pub fn knn_kl(samples_p: &[[f64; 2]], samples_q: &[[f64; 2]], k: usize) -> Result<f64> {
    let n = samples_p.len();
    let m = samples_q.len();
    if n < MIN_KNN_POINTS || m < MIN_KNN_POINTS {
        return Err(Error::Input(format!(
            "knn_kl needs at least {MIN_KNN_POINTS} points per set, got {n} and {m}"
        )));
    }
    if k < 1 || k >= n.min(m) {
        return Err(Error::Input(format!(
            "knn_kl needs 1 <= k < min set size, got k={k}"
        )));
    }
    if let Some(est) = knn_kl_attempt(samples_p, samples_q, k) {
        return Ok(est);
    }
    let mut rng = Rng::for_phase(0, "knn-jitter");
    let mut jitter = |pts: &[[f64; 2]]| -> Vec<[f64; 2]> {
        pts.iter()
            .map(|p| {
                [
                    p[0] + rng.uniform_range(-JITTER_MAGNITUDE, JITTER_MAGNITUDE),
                    p[1] + rng.uniform_range(-JITTER_MAGNITUDE, JITTER_MAGNITUDE),
                ]
            })
            .collect()
    };
    let p = jitter(samples_p);
    let q = jitter(samples_q);
    knn_kl_attempt(&p, &q, k)
        .ok_or_else(|| Error::Internal("zero NN distances persisted after jitter".into()))
}

// ── coverage ─────────────────────────────────────────────────────────────────

fn within(p: [f64; 2], mean: [f64; 2], radius: f64) -> bool {
    (p[0] - mean[0]).powi(2) + (p[1] - mean[1]).powi(2) <= radius * radius
}

/// Fraction of class-k conditional samples within `radius_thresh` of class
/// k's true mean, for each class.
pub fn class_coverage(
    samples_per_class: &[Vec<[f64; 2]>],
    class_means: &[[f64; 2]],
    radius_thresh: f64,
) -> Result<Vec<f64>> {
    if samples_per_class.len() != class_means.len() {
        return Err(Error::Input(format!(
            "coverage: {} sample sets for {} classes",
            samples_per_class.len(),
            class_means.len()
        )));
    }
    samples_per_class
        .iter()
        .zip(class_means)
        .map(|(samples, &mean)| {
            if samples.is_empty() {
                return Err(Error::Input("coverage: empty class sample set".into()));
            }
            let hits = samples
                .iter()
                .filter(|&&p| within(p, mean, radius_thresh))
                .count();
            Ok(hits as f64 / samples.len() as f64)
        })
        .collect()
}

// ── bound check ──────────────────────────────────────────────────────────────

/// Empirical summary of the KL <= lambda * ||dtheta|| relationship.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundSummary {
    /// Max over reports of kl / delta_theta_l2 (0 where the distance is 0).
    pub max_ratio: f64,
    /// Spearman rank correlation between kl and delta_theta_l2.
    pub rank_correlation: f64,
}

fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks on ties; 0 when either side
/// has no rank variance.
fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    let n = ra.len() as f64;
    let mean_a = ra.iter().sum::<f64>() / n;
    let mean_b = rb.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - mean_a) * (y - mean_b);
        var_a += (x - mean_a).powi(2);
        var_b += (y - mean_b).powi(2);
    }
    if var_a == 0.0 || var_b == 0.0 {
        return 0.0;
    }
    cov / (var_a * var_b).sqrt()
}

/// Max empirical KL/distance ratio and the rank correlation between the two,
/// across a set of drift reports.
pub fn bound_check(reports: &[DriftReport]) -> Result<BoundSummary> {
    if reports.len() < 3 {
        return Err(Error::Input(format!(
            "bound_check needs at least 3 reports, got {}",
            reports.len()
        )));
    }
    let max_ratio = reports
        .iter()
        .map(|r| {
            if r.delta_theta_l2 > 0.0 {
                r.kl_base_vs_per / r.delta_theta_l2
            } else {
                0.0
            }
        })
        .fold(0.0f64, f64::max);
    let kl: Vec<f64> = reports.iter().map(|r| r.kl_base_vs_per).collect();
    let dt: Vec<f64> = reports.iter().map(|r| r.delta_theta_l2).collect();
    Ok(BoundSummary {
        max_ratio,
        rank_correlation: spearman(&kl, &dt),
    })
}

// ── full report ──────────────────────────────────────────────────────────────

/// `n` conditional samples from each of `classes` classes, class 0 first.
pub fn sample_class_conditional(
    params: &ModelParams,
    sched: &NoiseSchedule,
    classes: usize,
    n: usize,
    rng: &mut Rng,
) -> Result<Vec<Vec<[f64; 2]>>> {
    (0..classes)
        .map(|c| ancestral_sample(params, c, n, sched, rng))
        .collect()
}

/// Full drift report given already-drawn base samples (one set per original
/// class). `rng` drives the personalized-model sampling.
#[allow(clippy::too_many_arguments)]
pub fn drift_report_with_base_samples(
    base_samples: &[Vec<[f64; 2]>],
    base: &ModelParams,
    per: &ModelParams,
    sched: &NoiseSchedule,
    cfg: &EvalConfig,
    lambda: f64,
    seed: u64,
    rng: &mut Rng,
) -> Result<DriftReport> {
    if !base.congruent(per) {
        return Err(Error::Input("drift report: architecture mismatch".into()));
    }
    let classes = cfg.class_means.len();
    if base_samples.len() != classes {
        return Err(Error::Input(format!(
            "drift report: {} base sample sets for {} classes",
            base_samples.len(),
            classes
        )));
    }

    let per_samples = sample_class_conditional(per, sched, classes, cfg.n_eval, rng)?;
    let new_class_fit = match cfg.new_class {
        Some((id, mean)) if id < per.arch.num_classes => {
            let samples = ancestral_sample(per, id, cfg.n_eval, sched, rng)?;
            let hits = samples
                .iter()
                .filter(|&&p| within(p, mean, cfg.coverage_radius))
                .count();
            hits as f64 / samples.len() as f64
        }
        _ => 0.0,
    };

    let pooled_base: Vec<[f64; 2]> = base_samples.iter().flatten().copied().collect();
    let pooled_per: Vec<[f64; 2]> = per_samples.iter().flatten().copied().collect();
    let kl = knn_kl(&pooled_base, &pooled_per, cfg.knn_k)?;
    let coverage = class_coverage(&per_samples, &cfg.class_means, cfg.coverage_radius)?;

    let delta_theta_l2 = param_distance(per, base, Norm::L2Squared)?.sqrt();
    let delta_theta_l1 = param_distance(per, base, Norm::L1)?;
    let probes = delta_eps_probes(
        per.arch.timesteps,
        classes.min(per.arch.num_classes),
        DELTA_EPS_PROBE_COUNT,
        DELTA_EPS_PROBE_SEED,
    );
    let delta_eps_val = delta_eps(base, per, &probes)?;

    Ok(DriftReport {
        lambda,
        seed,
        delta_theta_l2,
        delta_theta_l1,
        delta_eps: delta_eps_val,
        kl_base_vs_per: kl,
        coverage,
        new_class_fit,
        bound_ratio: if delta_theta_l2 > 0.0 {
            kl / delta_theta_l2
        } else {
            0.0
        },
    })
}

/// Full drift report: samples both models (base first) and computes every
/// `DriftReport` field.
pub fn make_drift_report(
    base: &ModelParams,
    per: &ModelParams,
    sched: &NoiseSchedule,
    cfg: &EvalConfig,
    lambda: f64,
    seed: u64,
    rng: &mut Rng,
) -> Result<DriftReport> {
    let base_samples =
        sample_class_conditional(base, sched, cfg.class_means.len(), cfg.n_eval, rng)?;
    drift_report_with_base_samples(&base_samples, base, per, sched, cfg, lambda, seed, rng)
}
