//! Variational Bayesian Gaussian mixture with Dirichlet weights and
//! Normal-Wishart component priors.
//!
//! Coordinate ascent alternates the parameter update (given
//! responsibilities) and the responsibility update (given parameters); the
//! evidence lower bound is evaluated after each parameter update. After
//! convergence, components are greedily deleted while doing so raises the
//! bound, which removes the redundant components a k-means seeding leaves
//! behind on unimodal data.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{cholesky_lower, floor_eigenvalues, MixtureModel};
use crate::error::{Error, Result};
use crate::special::{digamma, ln_gamma};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VariationalConfig {
    /// Number of candidate components.
    pub max_components: usize,
    /// Components whose expected weight falls below this are dropped.
    pub prune_weight: f64,
    /// Minimum batch size; `None` means `2 · d · max_components`.
    pub min_points: Option<usize>,
    pub max_iterations: usize,
    /// Relative change of the lower bound that counts as converged.
    pub tolerance: f64,
    /// Seed for the k-means++ initialization.
    pub seed: u64,
    pub greedy_deletion: bool,
}

impl Default for VariationalConfig {
    fn default() -> Self {
        Self {
            max_components: 5,
            prune_weight: 0.01,
            min_points: None,
            max_iterations: 200,
            tolerance: 1e-6,
            seed: 0x5eed,
            greedy_deletion: true,
        }
    }
}

impl VariationalConfig {
    pub fn min_points_for(&self, dim: usize) -> usize {
        self.min_points.unwrap_or(2 * dim * self.max_components)
    }
}

/// Result of a variational fit.
#[derive(Debug, Clone)]
pub struct MixtureFit {
    /// Surviving components with renormalized weights; support count is the
    /// batch size.
    pub model: MixtureModel,
    /// Hard assignment (responsibility argmax) of every input point.
    pub assignments: Vec<usize>,
    /// Number of points assigned to each surviving component.
    pub counts: Vec<usize>,
    /// Lower bound of the accepted solution.
    pub elbo: f64,
    /// Lower-bound trace of every coordinate-ascent run, in execution order.
    pub elbo_traces: Vec<Vec<f64>>,
}

struct Prior {
    alpha0: f64,
    beta0: f64,
    m0: DVector<f64>,
    w0_inv: DMatrix<f64>,
    nu0: f64,
    ln_b0: f64,
}

struct Stats {
    nk: Vec<f64>,
    xbar: Vec<DVector<f64>>,
    s: Vec<DMatrix<f64>>,
}

struct Posterior {
    alpha: Vec<f64>,
    beta: Vec<f64>,
    m: Vec<DVector<f64>>,
    w_inv: Vec<DMatrix<f64>>,
    w: Vec<DMatrix<f64>>,
    // lower Cholesky factor of W⁻¹
    w_inv_chol: Vec<DMatrix<f64>>,
    nu: Vec<f64>,
    ln_pi: Vec<f64>,
    ln_lambda: Vec<f64>,
    ln_det_w: Vec<f64>,
}

struct Run {
    resp: Vec<f64>,
    post: Posterior,
    k: usize,
    elbo: f64,
    trace: Vec<f64>,
}

struct Problem<'a> {
    data: &'a [f64],
    n: usize,
    d: usize,
    prior: Prior,
    config: &'a VariationalConfig,
}

/// Fits a mixture to `residuals` by variational inference.
pub fn fit_mixture_variational(residuals: &[DVector<f64>], config: &VariationalConfig) -> Result<MixtureFit> {
    let n = residuals.len();
    let d = residuals.first().map(|r| r.len()).unwrap_or(0);
    if config.max_components == 0 {
        return Err(Error::Config("max_components must be positive".into()));
    }
    let needed = config.min_points_for(d.max(1)).max(2);
    if n < needed || d == 0 {
        return Err(Error::TooFewPoints { needed, got: n });
    }
    if let Some(bad) = residuals.iter().find(|r| r.len() != d) {
        return Err(Error::DimensionMismatch {
            context: "residual batch",
            expected: d,
            actual: bad.len(),
        });
    }
    if residuals.iter().any(|r| r.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite("residual batch"));
    }
    let data: Vec<f64> = residuals.iter().flat_map(|r| r.iter().copied()).collect();

    let mean = DVector::from_fn(d, |j, _| (0..n).map(|i| data[i * d + j]).sum::<f64>() / n as f64);
    let mut cov = DMatrix::zeros(d, d);
    for i in 0..n {
        let x = DVector::from_column_slice(&data[i * d..(i + 1) * d]) - &mean;
        cov += &x * x.transpose();
    }
    cov /= n as f64;
    let floor = covariance_floor(&cov);
    let w0_inv = floor_eigenvalues(&cov, floor);
    let nu0 = d as f64;
    let w0_inv_chol = cholesky_lower(&w0_inv, "prior scale")?;
    let ln_det_w0 = -2.0 * w0_inv_chol.diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let k = config.max_components.min(n);
    let prior = Prior {
        alpha0: 1.0 / config.max_components as f64,
        beta0: 1.0,
        m0: mean,
        ln_b0: ln_wishart_norm(ln_det_w0, nu0, d),
        w0_inv,
        nu0,
    };
    let problem = Problem {
        data: &data,
        n,
        d,
        prior,
        config,
    };

    let init = kmeans_init(&data, n, d, k, config.seed);
    let mut traces = Vec::new();
    let mut best = problem.run(init, k)?;
    traces.push(best.trace.clone());

    if config.greedy_deletion {
        'outer: while best.k > 1 {
            let nk = column_sums(&best.resp, n, best.k);
            let mut order: Vec<usize> = (0..best.k).collect();
            order.sort_by(|a, b| nk[*a].total_cmp(&nk[*b]).then(a.cmp(b)));
            for drop in order {
                let resp = remove_column(&best.resp, n, best.k, drop);
                let candidate = problem.run(resp, best.k - 1)?;
                traces.push(candidate.trace.clone());
                if candidate.elbo > best.elbo {
                    best = candidate;
                    continue 'outer;
                }
            }
            break;
        }
    }

    problem.finish(best, floor, traces)
}

fn covariance_floor(cov: &DMatrix<f64>) -> f64 {
    let d = cov.nrows() as f64;
    let f = 1e-8 * cov.trace() / d;
    if f > 0.0 && f.is_finite() {
        f
    } else {
        1e-12
    }
}

impl Problem<'_> {
    fn run(&self, mut resp: Vec<f64>, k: usize) -> Result<Run> {
        let mut trace = Vec::new();
        let mut last: Option<(Posterior, f64)> = None;
        for _ in 0..self.config.max_iterations.max(1) {
            let stats = self.stats(&resp, k);
            let post = self.update_parameters(&stats)?;
            let elbo = self.elbo(&resp, &stats, &post, k);
            trace.push(elbo);
            resp = self.responsibilities(&post, k);
            let converged = last
                .as_ref()
                .is_some_and(|(_, prev)| (elbo - prev).abs() <= self.config.tolerance * elbo.abs());
            last = Some((post, elbo));
            if converged {
                break;
            }
        }
        let (post, elbo) = last.expect("at least one iteration");
        Ok(Run {
            resp,
            post,
            k,
            elbo,
            trace,
        })
    }

    fn stats(&self, resp: &[f64], k: usize) -> Stats {
        let (n, d) = (self.n, self.d);
        let mut nk = vec![0.0; k];
        let mut sums = vec![DVector::zeros(d); k];
        for i in 0..n {
            let x = &self.data[i * d..(i + 1) * d];
            for c in 0..k {
                let r = resp[i * k + c];
                if r == 0.0 {
                    continue;
                }
                nk[c] += r;
                for j in 0..d {
                    sums[c][j] += r * x[j];
                }
            }
        }
        let xbar: Vec<DVector<f64>> = (0..k)
            .map(|c| {
                if nk[c] > 1e-12 {
                    &sums[c] / nk[c]
                } else {
                    self.prior.m0.clone()
                }
            })
            .collect();
        let mut s = vec![DMatrix::zeros(d, d); k];
        let mut diff = vec![0.0; d];
        for i in 0..n {
            let x = &self.data[i * d..(i + 1) * d];
            for c in 0..k {
                let r = resp[i * k + c];
                if r == 0.0 {
                    continue;
                }
                for j in 0..d {
                    diff[j] = x[j] - xbar[c][j];
                }
                for a in 0..d {
                    for b in 0..d {
                        s[c][(a, b)] += r * diff[a] * diff[b];
                    }
                }
            }
        }
        for c in 0..k {
            if nk[c] > 1e-12 {
                s[c] /= nk[c];
            } else {
                s[c].fill(0.0);
            }
        }
        Stats { nk, xbar, s }
    }

    fn update_parameters(&self, stats: &Stats) -> Result<Posterior> {
        let p = &self.prior;
        let d = self.d;
        let k = stats.nk.len();
        let mut post = Posterior {
            alpha: Vec::with_capacity(k),
            beta: Vec::with_capacity(k),
            m: Vec::with_capacity(k),
            w_inv: Vec::with_capacity(k),
            w: Vec::with_capacity(k),
            w_inv_chol: Vec::with_capacity(k),
            nu: Vec::with_capacity(k),
            ln_pi: Vec::with_capacity(k),
            ln_lambda: Vec::with_capacity(k),
            ln_det_w: Vec::with_capacity(k),
        };
        for c in 0..k {
            let nk = stats.nk[c];
            let beta = p.beta0 + nk;
            let m = (&p.m0 * p.beta0 + &stats.xbar[c] * nk) / beta;
            let dm = &stats.xbar[c] - &p.m0;
            let w_inv = &p.w0_inv + &stats.s[c] * nk + (&dm * dm.transpose()) * (p.beta0 * nk / beta);
            let w_inv = super::symmetrize(&w_inv);
            let chol = cholesky_lower(&w_inv, "variational scale")?;
            let ln_det_w = -2.0 * chol.diagonal().iter().map(|v| v.ln()).sum::<f64>();
            let w = nalgebra::Cholesky::new(w_inv.clone())
                .ok_or(Error::NotPositiveDefinite { context: "variational scale" })?
                .inverse();
            let nu = p.nu0 + nk;
            let ln_lambda = (1..=d).map(|i| digamma(0.5 * (nu + 1.0 - i as f64))).sum::<f64>()
                + d as f64 * 2f64.ln()
                + ln_det_w;
            post.alpha.push(p.alpha0 + nk);
            post.beta.push(beta);
            post.m.push(m);
            post.w_inv.push(w_inv);
            post.w.push(w);
            post.w_inv_chol.push(chol);
            post.nu.push(nu);
            post.ln_lambda.push(ln_lambda);
            post.ln_det_w.push(ln_det_w);
        }
        let alpha_sum: f64 = post.alpha.iter().sum();
        let dg = digamma(alpha_sum);
        post.ln_pi = post.alpha.iter().map(|a| digamma(*a) - dg).collect();
        Ok(post)
    }

    fn responsibilities(&self, post: &Posterior, k: usize) -> Vec<f64> {
        let (n, d) = (self.n, self.d);
        let df = d as f64;
        let mut resp = vec![0.0; n * k];
        let mut logp = vec![0.0; k];
        let mut w = vec![0.0; d];
        for i in 0..n {
            let x = &self.data[i * d..(i + 1) * d];
            for c in 0..k {
                let (l, m) = (&post.w_inv_chol[c], &post.m[c]);
                let mut q = 0.0;
                for a in 0..d {
                    let mut acc = x[a] - m[a];
                    for b in 0..a {
                        acc -= l[(a, b)] * w[b];
                    }
                    w[a] = acc / l[(a, a)];
                    q += w[a] * w[a];
                }
                logp[c] = post.ln_pi[c] + 0.5 * post.ln_lambda[c]
                    - 0.5 * df * (2.0 * PI).ln()
                    - 0.5 * (df / post.beta[c] + post.nu[c] * q);
            }
            let mx = logp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logp.iter().map(|v| (v - mx).exp()).sum();
            for c in 0..k {
                resp[i * k + c] = (logp[c] - mx).exp() / z;
            }
        }
        resp
    }

    fn elbo(&self, resp: &[f64], stats: &Stats, post: &Posterior, k: usize) -> f64 {
        let p = &self.prior;
        let d = self.d;
        let df = d as f64;
        let ln2pi = (2.0 * PI).ln();
        let mut e_ln_px = 0.0;
        let mut e_ln_pz = 0.0;
        let mut e_ln_pmu = 0.0;
        let mut e_ln_qmu = 0.0;
        for c in 0..k {
            let nk = stats.nk[c];
            let w = &post.w[c];
            let tr_sw = (&stats.s[c] * w).trace();
            let dx = &stats.xbar[c] - &post.m[c];
            let qx = (dx.transpose() * w * &dx)[0];
            e_ln_px += 0.5
                * nk
                * (post.ln_lambda[c] - df / post.beta[c] - post.nu[c] * tr_sw - post.nu[c] * qx - df * ln2pi);
            e_ln_pz += nk * post.ln_pi[c];

            let dm = &post.m[c] - &p.m0;
            let qm = (dm.transpose() * w * &dm)[0];
            e_ln_pmu += 0.5
                * (df * (p.beta0 / (2.0 * PI)).ln() + post.ln_lambda[c]
                    - df * p.beta0 / post.beta[c]
                    - p.beta0 * post.nu[c] * qm)
                + 0.5 * (p.nu0 - df - 1.0) * post.ln_lambda[c]
                - 0.5 * post.nu[c] * (&p.w0_inv * w).trace();

            let ln_b = ln_wishart_norm(post.ln_det_w[c], post.nu[c], d);
            let entropy = -ln_b - 0.5 * (post.nu[c] - df - 1.0) * post.ln_lambda[c] + 0.5 * post.nu[c] * df;
            e_ln_qmu += 0.5 * post.ln_lambda[c] + 0.5 * df * (post.beta[c] / (2.0 * PI)).ln() - 0.5 * df - entropy;
        }
        e_ln_pmu += k as f64 * p.ln_b0;

        let sum_ln_pi: f64 = post.ln_pi.iter().sum();
        let e_ln_ppi = ln_dirichlet_norm(&vec![p.alpha0; k]) + (p.alpha0 - 1.0) * sum_ln_pi;
        let e_ln_qpi = post
            .alpha
            .iter()
            .zip(&post.ln_pi)
            .map(|(a, l)| (a - 1.0) * l)
            .sum::<f64>()
            + ln_dirichlet_norm(&post.alpha);
        let e_ln_qz: f64 = resp.iter().filter(|r| **r > 0.0).map(|r| r * r.ln()).sum();

        e_ln_px + e_ln_pz + e_ln_ppi + e_ln_pmu - e_ln_qz - e_ln_qpi - e_ln_qmu
    }

    fn finish(&self, run: Run, floor: f64, traces: Vec<Vec<f64>>) -> Result<MixtureFit> {
        let post = &run.post;
        let alpha_sum: f64 = post.alpha.iter().sum();
        let keep: Vec<usize> = (0..run.k)
            .filter(|c| post.alpha[*c] / alpha_sum >= self.config.prune_weight)
            .collect();
        let keep = if keep.is_empty() {
            // every weight under the prune threshold: keep the heaviest
            let best = (0..run.k).fold(0, |b, c| if post.alpha[c] > post.alpha[b] { c } else { b });
            vec![best]
        } else {
            keep
        };
        let comps = keep
            .iter()
            .map(|&c| {
                let cov = floor_eigenvalues(&(&post.w_inv[c] / post.nu[c]), floor);
                (post.alpha[c] / alpha_sum, post.m[c].clone(), cov)
            })
            .collect::<Vec<_>>();
        let model = MixtureModel::normalized(comps, self.n as u64)?;

        let mut assignments = Vec::with_capacity(self.n);
        let mut counts = vec![0usize; keep.len()];
        for i in 0..self.n {
            let row = &run.resp[i * run.k..(i + 1) * run.k];
            let mut best = 0;
            for (slot, &c) in keep.iter().enumerate() {
                if row[c] > row[keep[best]] {
                    best = slot;
                }
            }
            assignments.push(best);
            counts[best] += 1;
        }
        Ok(MixtureFit {
            model,
            assignments,
            counts,
            elbo: run.elbo,
            elbo_traces: traces,
        })
    }
}

// ln B(W, ν) of the Wishart normalizer, from ln|W|.
fn ln_wishart_norm(ln_det_w: f64, nu: f64, d: usize) -> f64 {
    let df = d as f64;
    -0.5 * nu * ln_det_w
        - (0.5 * nu * df * 2f64.ln()
            + 0.25 * df * (df - 1.0) * PI.ln()
            + (1..=d).map(|i| ln_gamma(0.5 * (nu + 1.0 - i as f64))).sum::<f64>())
}

fn ln_dirichlet_norm(alpha: &[f64]) -> f64 {
    ln_gamma(alpha.iter().sum()) - alpha.iter().map(|a| ln_gamma(*a)).sum::<f64>()
}

fn column_sums(resp: &[f64], n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; k];
    for i in 0..n {
        for c in 0..k {
            out[c] += resp[i * k + c];
        }
    }
    out
}

fn remove_column(resp: &[f64], n: usize, k: usize, drop: usize) -> Vec<f64> {
    let k2 = k - 1;
    let mut out = Vec::with_capacity(n * k2);
    for i in 0..n {
        let row = &resp[i * k..(i + 1) * k];
        let total: f64 = row.iter().enumerate().filter(|(c, _)| *c != drop).map(|(_, v)| v).sum();
        for (c, v) in row.iter().enumerate() {
            if c == drop {
                continue;
            }
            out.push(if total > 0.0 { v / total } else { 1.0 / k2 as f64 });
        }
    }
    out
}

// k-means++ seeding plus a few Lloyd steps, run over the points in sorted
// order so the result depends only on the multiset of inputs.
fn kmeans_init(data: &[f64], n: usize, d: usize, k: usize, seed: u64) -> Vec<f64> {
    let pt = |i: usize| &data[i * d..(i + 1) * d];
    let dist2 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        pt(a)
            .iter()
            .zip(pt(b))
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers: Vec<Vec<f64>> = vec![pt(order[rng.random_range(0..n)]).to_vec()];
    let mut best_d2: Vec<f64> = order.iter().map(|&i| dist2(pt(i), &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = best_d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (slot, v) in best_d2.iter().enumerate() {
                acc += v;
                if acc >= target && *v > 0.0 {
                    chosen = slot;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = pt(order[pick]).to_vec();
        for (slot, &i) in order.iter().enumerate() {
            best_d2[slot] = best_d2[slot].min(dist2(pt(i), &c));
        }
        centers.push(c);
    }

    let mut labels = vec![0usize; n];
    for _ in 0..10 {
        for (i, label) in labels.iter_mut().enumerate() {
            let mut best = 0;
            let mut bd = f64::INFINITY;
            for (c, center) in centers.iter().enumerate() {
                let dd = dist2(pt(i), center);
                if dd < bd {
                    bd = dd;
                    best = c;
                }
            }
            *label = best;
        }
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for &i in &order {
            counts[labels[i]] += 1;
            for j in 0..d {
                sums[labels[i]][j] += pt(i)[j];
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for j in 0..d {
                    centers[c][j] = sums[c][j] / counts[c] as f64;
                }
            }
        }
    }
    let mut resp = vec![0.0; n * k];
    for (i, l) in labels.iter().enumerate() {
        resp[i * k + l] = 1.0;
    }
    resp
}
