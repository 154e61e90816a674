//! Class-balance distances, paired t-scores, winning rates, penalty matrices
//! and the centroid-to-query transport cost.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::data::{class_distribution, Dataset};
use crate::error::{ensure_len, invalid, Result};
use crate::federation::LabelState;
use crate::linalg::sq_dist;

/// Critical value used for four seeds (two-sided 95%, df = 3).
pub const T_CRITICAL_FOUR_SEEDS: f64 = 2.776;

/// Normalisation of the L1 class-distribution distance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmdNorm {
    /// `0.5 · Σ|p − q|`
    #[default]
    TotalVariation,
    /// `Σ|p − q|`
    L1,
}

impl EmdNorm {
    fn factor(self) -> f64 {
        match self {
            EmdNorm::TotalVariation => 0.5,
            EmdNorm::L1 => 1.0,
        }
    }
}

pub fn emd(p: &[f64], q: &[f64]) -> Result<f64> {
    emd_with(p, q, EmdNorm::TotalVariation)
}

pub fn emd_with(p: &[f64], q: &[f64], norm: EmdNorm) -> Result<f64> {
    ensure_len(p.len(), q.len())?;
    Ok(norm.factor() * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

fn uniform(c: usize) -> Vec<f64> {
    vec![1.0 / c as f64; c]
}

/// Mean over clients of the distance between each labeled set's class
/// distribution and the uniform distribution.
pub fn local_emd(dataset: &Dataset, state: &LabelState, norm: EmdNorm) -> f64 {
    let c = dataset.num_classes;
    let u = uniform(c);
    let total: f64 = state
        .clients
        .iter()
        .map(|pool| {
            let labels: Vec<usize> = pool.labeled.iter().map(|&i| dataset.label(i)).collect();
            emd_with(&class_distribution(&labels, c), &u, norm).expect("same length")
        })
        .sum();
    total / state.clients.len().max(1) as f64
}

/// Distance of the union of all labeled sets from uniform.
pub fn global_emd(dataset: &Dataset, state: &LabelState, norm: EmdNorm) -> f64 {
    let c = dataset.num_classes;
    let labels: Vec<usize> = state.labeled_union().iter().map(|&i| dataset.label(i)).collect();
    emd_with(&class_distribution(&labels, c), &uniform(c), norm).expect("same length")
}

/// Paired t-score `sqrt(n)·μ/σ` over per-seed accuracy differences, with σ the
/// sample standard deviation (divisor n − 1). Zero spread gives `±∞` for a
/// non-zero mean and `0` otherwise.
pub fn t_score(a_i: &[f64], a_j: &[f64]) -> Result<f64> {
    if a_i.len() != a_j.len() {
        return Err(invalid(format!(
            "paired t-test needs equal seed counts ({} vs {})",
            a_i.len(),
            a_j.len()
        )));
    }
    let n = a_i.len();
    if n < 2 {
        return Err(invalid("paired t-test needs at least 2 seeds"));
    }
    let diffs: Vec<f64> = a_i.iter().zip(a_j).map(|(x, y)| x - y).collect();
    let mu = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mu) * (d - mu)).sum::<f64>() / (n - 1) as f64;
    let sigma = var.sqrt();
    Ok(if sigma == 0.0 {
        if mu > 0.0 {
            f64::INFINITY
        } else if mu < 0.0 {
            f64::NEG_INFINITY
        } else {
            0.0
        }
    } else {
        (n as f64).sqrt() * mu / sigma
    })
}

/// Two-sided 95% Student-t critical value for `n` paired seeds.
pub fn critical_value(n: usize) -> f64 {
    if n == 4 {
        return T_CRITICAL_FOUR_SEEDS;
    }
    let df = n.saturating_sub(1).max(1) as f64;
    StudentsT::new(0.0, 1.0, df)
        .expect("positive degrees of freedom")
        .inverse_cdf(0.975)
}

/// Fraction of rounds whose t-score exceeds `threshold`.
pub fn winning_rate_from_t(t_scores: &[f64], threshold: f64) -> f64 {
    if t_scores.is_empty() {
        return 0.0;
    }
    t_scores.iter().filter(|&&t| t > threshold).count() as f64 / t_scores.len() as f64
}

/// Per-round accuracies over seeds for one strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracySeries {
    pub strategy: String,
    /// `rounds[r][seed]`
    pub rounds: Vec<Vec<f64>>,
}

impl AccuracySeries {
    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.rounds.first() else {
            return Err(invalid(format!("series {} has no rounds", self.strategy)));
        };
        for r in &self.rounds {
            ensure_len(first.len(), r.len())?;
            if r.iter().any(|a| !(0.0..=1.0).contains(a)) {
                return Err(invalid("accuracies must lie in [0, 1]"));
            }
        }
        Ok(())
    }

    pub fn num_seeds(&self) -> usize {
        self.rounds.first().map_or(0, Vec::len)
    }
}

pub fn round_t_scores(i: &AccuracySeries, j: &AccuracySeries) -> Result<Vec<f64>> {
    i.validate()?;
    j.validate()?;
    if i.rounds.len() != j.rounds.len() {
        return Err(invalid("series cover different numbers of rounds"));
    }
    i.rounds.iter().zip(&j.rounds).map(|(a, b)| t_score(a, b)).collect()
}

pub fn winning_rate(i: &AccuracySeries, j: &AccuracySeries, threshold: f64) -> Result<f64> {
    Ok(winning_rate_from_t(&round_t_scores(i, j)?, threshold))
}

/// `values[i][j]` sums the winning rate of strategy `i` over `j` across
/// settings; `defeated_mean[j]` averages column `j` over the other strategies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltyMatrix {
    pub strategies: Vec<String>,
    pub values: Vec<Vec<f64>>,
    pub defeated_mean: Vec<f64>,
}

impl PenaltyMatrix {
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["strategy".to_string()];
        header.extend(self.strategies.iter().cloned());
        w.write_record(&header)?;
        for (name, row) in self.strategies.iter().zip(&self.values) {
            let mut rec = vec![name.clone()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        let mut rec = vec!["defeated_mean".to_string()];
        rec.extend(self.defeated_mean.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
        w.flush()?;
        Ok(())
    }
}

/// Each setting lists one series per strategy; strategies are matched by name
/// and a strategy missing from a setting contributes nothing there.
/// `threshold = None` picks the critical value for the setting's seed count.
pub fn penalty_matrix(settings: &[Vec<AccuracySeries>], threshold: Option<f64>) -> Result<PenaltyMatrix> {
    let mut strategies: Vec<String> = Vec::new();
    for s in settings.iter().flatten() {
        if !strategies.contains(&s.strategy) {
            strategies.push(s.strategy.clone());
        }
    }
    let n = strategies.len();
    let mut values = vec![vec![0.0; n]; n];
    for setting in settings {
        for a in setting {
            for b in setting {
                if a.strategy == b.strategy {
                    continue;
                }
                let i = strategies.iter().position(|s| *s == a.strategy).unwrap();
                let j = strategies.iter().position(|s| *s == b.strategy).unwrap();
                let th = threshold.unwrap_or_else(|| critical_value(a.num_seeds()));
                values[i][j] += winning_rate(a, b, th)?;
            }
        }
    }
    let defeated_mean = (0..n)
        .map(|j| {
            if n < 2 {
                0.0
            } else {
                (0..n).filter(|&i| i != j).map(|i| values[i][j]).sum::<f64>() / (n - 1) as f64
            }
        })
        .collect();
    Ok(PenaltyMatrix {
        strategies,
        values,
        defeated_mean,
    })
}

/// Minimum-cost perfect matching on a square cost matrix (Hungarian method
/// with potentials). Returns the cost and `assignment[row] = column`.
pub fn min_cost_assignment(cost: &[Vec<f64>]) -> (f64, Vec<usize>) {
    let n = cost.len();
    if n == 0 {
        return (0.0, Vec::new());
    }
    // 1-based arrays; column 0 is a virtual start.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut matched_row = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        matched_row[0] = row;
        let mut col0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[col0] = true;
            let r0 = matched_row[col0];
            let mut delta = f64::INFINITY;
            let mut col1 = 0;
            for col in 1..=n {
                if !used[col] {
                    let cur = cost[r0 - 1][col - 1] - u[r0] - v[col];
                    if cur < minv[col] {
                        minv[col] = cur;
                        way[col] = col0;
                    }
                    if minv[col] < delta {
                        delta = minv[col];
                        col1 = col;
                    }
                }
            }
            for col in 0..=n {
                if used[col] {
                    u[matched_row[col]] += delta;
                    v[col] -= delta;
                } else {
                    minv[col] -= delta;
                }
            }
            col0 = col1;
            if matched_row[col0] == 0 {
                break;
            }
        }
        loop {
            let col1 = way[col0];
            matched_row[col0] = matched_row[col1];
            col0 = col1;
            if col0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for col in 1..=n {
        assignment[matched_row[col] - 1] = col - 1;
    }
    let total = assignment.iter().enumerate().map(|(r, &c)| cost[r][c]).sum();
    (total, assignment)
}

/// Minimum over permutations by exhaustive enumeration (Heap's algorithm).
pub fn min_cost_by_enumeration(cost: &[Vec<f64>]) -> f64 {
    let n = cost.len();
    let mut perm: Vec<usize> = (0..n).collect();
    let eval = |p: &[usize]| p.iter().enumerate().map(|(r, &c)| cost[r][c]).sum::<f64>();
    let mut best = eval(&perm);
    let mut c = vec![0usize; n];
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            best = best.min(eval(&perm));
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    best
}

const ENUMERATION_LIMIT: usize = 8;

/// `M = min_σ Σ_b ||c_b − x_σ(b)||²` over one-to-one matchings of centroids to
/// selected points.
pub fn transport_cost(centroids: &[Vec<f64>], selected: &[Vec<f64>]) -> Result<f64> {
    if centroids.len() != selected.len() {
        return Err(invalid(format!(
            "{} centroids but {} selected points",
            centroids.len(),
            selected.len()
        )));
    }
    let cost: Vec<Vec<f64>> = centroids
        .iter()
        .map(|c| {
            selected
                .iter()
                .map(|x| {
                    ensure_len(c.len(), x.len())?;
                    Ok(sq_dist(c, x))
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    Ok(if cost.len() <= ENUMERATION_LIMIT {
        min_cost_by_enumeration(&cost)
    } else {
        min_cost_assignment(&cost).0
    })
}
