//! Embedding visualization: PCA preprocessing, an exact O(N^2) t-SNE,
//! cluster/spatial-structure statistics, and SVG scatter plots colored by
//! task label.

use ndarray::{Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::child_rng;

/// PCA projection to `k` components. Returns the projected rows and the
/// explained-variance fractions per component, eigenvalue-descending.
/// Component sign is fixed so the largest-magnitude loading is positive.
pub fn pca_reduce(x: &Array2<f64>, k: usize) -> Result<(Array2<f64>, Vec<f64>)> {
    let (n, d) = x.dim();
    if n < 2 {
        return Err(Error::invalid("PCA needs at least two rows"));
    }
    if k == 0 || k > d {
        return Err(Error::invalid(format!(
            "PCA component count {k} out of range for {d}-dim data"
        )));
    }
    let mean = x.mean_axis(Axis(0)).expect("n >= 2");
    let centered = x - &mean.view().insert_axis(Axis(0));
    let mut cov = nalgebra::DMatrix::<f64>::zeros(d, d);
    for i in 0..d {
        for j in i..d {
            let mut s = 0.0;
            for r in 0..n {
                s += centered[[r, i]] * centered[[r, j]];
            }
            s /= (n - 1) as f64;
            cov[(i, j)] = s;
            cov[(j, i)] = s;
        }
    }
    let eig = nalgebra::SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .expect("finite eigenvalues")
    });
    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let mut components = Array2::zeros((d, k));
    let mut explained = Vec::with_capacity(k);
    for (c, &ei) in order.iter().take(k).enumerate() {
        let col = eig.eigenvectors.column(ei);
        let mut max_abs = 0.0f64;
        let mut sign = 1.0;
        for v in col.iter() {
            if v.abs() > max_abs {
                max_abs = v.abs();
                sign = if *v < 0.0 { -1.0 } else { 1.0 };
            }
        }
        for i in 0..d {
            components[[i, c]] = sign * col[i];
        }
        explained.push(if total > 0.0 {
            eig.eigenvalues[ei].max(0.0) / total
        } else {
            0.0
        });
    }
    Ok((centered.dot(&components), explained))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub n_iters: usize,
    pub early_exaggeration: f64,
    pub exaggeration_iters: usize,
    /// Reduce the input to at most this many PCA dimensions first.
    pub pca_dims: usize,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        TsneConfig {
            perplexity: 30.0,
            n_iters: 1000,
            early_exaggeration: 12.0,
            exaggeration_iters: 250,
            pca_dims: 50,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TsneResult {
    pub coords: Array2<f64>,
    /// KL divergence sampled every 50 iterations (and at the last one).
    pub kl_trace: Vec<f64>,
}

fn pairwise_sq_dists(x: &Array2<f64>) -> Array2<f64> {
    let n = x.nrows();
    let mut d = Array2::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let diff = &x.row(i) - &x.row(j);
            let v = diff.dot(&diff);
            d[[i, j]] = v;
            d[[j, i]] = v;
        }
    }
    d
}

/// Row-conditional Gaussian affinities with per-point bandwidth found by
/// binary search so each row's perplexity (2^entropy) matches the target
/// within 1e-5. Rows sum to 1; the diagonal is zero.
pub fn conditional_affinities(sq_dists: &Array2<f64>, perplexity: f64) -> Result<Array2<f64>> {
    let n = sq_dists.nrows();
    if perplexity <= 1.0 || (perplexity >= (n - 1) as f64) {
        return Err(Error::invalid(format!(
            "perplexity {perplexity} must lie in (1, n-1) for n={n}"
        )));
    }
    let target_entropy = perplexity.ln();
    let mut p = Array2::zeros((n, n));
    for i in 0..n {
        let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
        let mut beta = 1.0f64;
        for _ in 0..100 {
            // entropy of the row distribution at this beta
            let mut max_neg = f64::NEG_INFINITY;
            for j in 0..n {
                if j != i {
                    max_neg = max_neg.max(-beta * sq_dists[[i, j]]);
                }
            }
            let mut sum = 0.0;
            let mut weighted = 0.0;
            for j in 0..n {
                if j == i {
                    continue;
                }
                let w = (-beta * sq_dists[[i, j]] - max_neg).exp();
                sum += w;
                weighted += w * sq_dists[[i, j]];
            }
            let entropy = sum.ln() + max_neg + beta * weighted / sum;
            let diff = entropy - target_entropy;
            if diff.abs() < 1e-5 {
                break;
            }
            if diff > 0.0 {
                lo = beta;
                beta = if hi.is_finite() { 0.5 * (lo + hi) } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = 0.5 * (lo + hi);
            }
        }
        let mut max_neg = f64::NEG_INFINITY;
        for j in 0..n {
            if j != i {
                max_neg = max_neg.max(-beta * sq_dists[[i, j]]);
            }
        }
        let mut sum = 0.0;
        for j in 0..n {
            if j == i {
                continue;
            }
            let w = (-beta * sq_dists[[i, j]] - max_neg).exp();
            p[[i, j]] = w;
            sum += w;
        }
        for j in 0..n {
            p[[i, j]] /= sum;
        }
    }
    Ok(p)
}

/// Exact t-SNE to 2D: symmetrized Gaussian input affinities, Student-t
/// output kernel, gradient descent with early exaggeration and the standard
/// momentum switch, learning rate n/12.
pub fn tsne(x: &Array2<f64>, cfg: &TsneConfig) -> Result<TsneResult> {
    let n = x.nrows();
    if n < 4 {
        return Err(Error::invalid("t-SNE needs at least 4 points"));
    }
    let reduced;
    let input = if x.ncols() > cfg.pca_dims {
        reduced = pca_reduce(x, cfg.pca_dims)?.0;
        &reduced
    } else {
        x
    };

    let cond = conditional_affinities(&pairwise_sq_dists(input), cfg.perplexity)?;
    let mut p = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            p[[i, j]] = ((cond[[i, j]] + cond[[j, i]]) / (2.0 * n as f64)).max(1e-12);
        }
        p[[i, i]] = 0.0;
    }

    let mut rng = child_rng(cfg.seed, &[0x54534e45]);
    let normal = Normal::new(0.0, 1e-2).expect("valid normal");
    let mut y = Array2::zeros((n, 2));
    for v in y.iter_mut() {
        *v = normal.sample(&mut rng);
    }
    let mut velocity: Array2<f64> = Array2::zeros((n, 2));
    let mut gains: Array2<f64> = Array2::from_elem((n, 2), 1.0);
    let lr = n as f64 / 12.0;
    let mut kl_trace = Vec::new();

    for iter in 0..cfg.n_iters {
        let ex = if iter < cfg.exaggeration_iters {
            cfg.early_exaggeration
        } else {
            1.0
        };
        let momentum = if iter < cfg.exaggeration_iters { 0.5 } else { 0.8 };

        // Student-t kernel q_ij ∝ (1 + |y_i - y_j|^2)^-1
        let mut num = Array2::zeros((n, n));
        let mut z = 0.0f64;
        for i in 0..n {
            for j in (i + 1)..n {
                let dx = y[[i, 0]] - y[[j, 0]];
                let dy = y[[i, 1]] - y[[j, 1]];
                let w = 1.0 / (1.0 + dx * dx + dy * dy);
                num[[i, j]] = w;
                num[[j, i]] = w;
                z += 2.0 * w;
            }
        }

        let mut grad: Array2<f64> = Array2::zeros((n, 2));
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let q = (num[[i, j]] / z).max(1e-12);
                let mult = (ex * p[[i, j]] - q) * num[[i, j]];
                grad[[i, 0]] += 4.0 * mult * (y[[i, 0]] - y[[j, 0]]);
                grad[[i, 1]] += 4.0 * mult * (y[[i, 1]] - y[[j, 1]]);
            }
        }
        // adaptive per-coordinate gains: grow when the gradient keeps its
        // direction against the velocity, shrink otherwise
        for ((g, v), gr) in gains.iter_mut().zip(velocity.iter()).zip(grad.iter()) {
            *g = if (gr > &0.0) != (v > &0.0) { *g + 0.2 } else { *g * 0.8 };
            *g = g.max(0.01);
        }
        velocity = &velocity * momentum - &(&gains * &grad * lr);
        y += &velocity;
        // recenter to keep the embedding from drifting
        let mean = y.mean_axis(Axis(0)).expect("n >= 4");
        y -= &mean.view().insert_axis(Axis(0));

        if iter % 50 == 0 || iter + 1 == cfg.n_iters {
            let mut kl = 0.0;
            for i in 0..n {
                for j in 0..n {
                    if i == j {
                        continue;
                    }
                    let q = (num[[i, j]] / z).max(1e-12);
                    kl += p[[i, j]] * (p[[i, j]] / q).ln();
                }
            }
            if !kl.is_finite() {
                return Err(Error::Numeric(format!("t-SNE KL diverged ({kl})")));
            }
            kl_trace.push(kl);
        }
    }
    Ok(TsneResult { coords: y, kl_trace })
}

/// Mean silhouette coefficient over all points, given integer cluster
/// labels. Requires at least two clusters.
pub fn silhouette(coords: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    let n = coords.nrows();
    if n != labels.len() {
        return Err(Error::invalid("labels length must match coordinate rows"));
    }
    let n_clusters = labels.iter().max().map_or(0, |m| m + 1);
    if n_clusters < 2 {
        return Err(Error::invalid("silhouette needs at least two clusters"));
    }
    let d = pairwise_sq_dists(coords).mapv(f64::sqrt);
    let mut total = 0.0;
    for i in 0..n {
        let mut sums = vec![0.0f64; n_clusters];
        let mut counts = vec![0usize; n_clusters];
        for j in 0..n {
            if i != j {
                sums[labels[j]] += d[[i, j]];
                counts[labels[j]] += 1;
            }
        }
        let own = labels[i];
        if counts[own] == 0 {
            continue; // singleton cluster contributes 0
        }
        let a = sums[own] / counts[own] as f64;
        let b = (0..n_clusters)
            .filter(|&c| c != own && counts[c] > 0)
            .map(|c| sums[c] / counts[c] as f64)
            .fold(f64::INFINITY, f64::min);
        total += (b - a) / a.max(b);
    }
    Ok(total / n as f64)
}

/// Moran's I spatial autocorrelation of `values` over a symmetric
/// k-nearest-neighbor weight graph built from `positions`.
pub fn morans_i(values: &[f64], positions: &Array2<f64>, k: usize) -> Result<f64> {
    let n = values.len();
    if n != positions.nrows() || n < 3 {
        return Err(Error::invalid("Moran's I needs >=3 matching points"));
    }
    if k == 0 || k >= n {
        return Err(Error::invalid(format!("k={k} out of range for n={n}")));
    }
    let d = pairwise_sq_dists(positions);
    let mut w = Array2::zeros((n, n));
    for i in 0..n {
        let mut order: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        order.sort_by(|&a, &b| d[[i, a]].partial_cmp(&d[[i, b]]).expect("finite"));
        for &j in order.iter().take(k) {
            w[[i, j]] = 1.0;
            w[[j, i]] = 1.0; // symmetrize
        }
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let dev: Vec<f64> = values.iter().map(|v| v - mean).collect();
    let denom: f64 = dev.iter().map(|z| z * z).sum();
    if denom == 0.0 {
        return Err(Error::Numeric("Moran's I undefined for constant values".into()));
    }
    let mut numer = 0.0;
    let mut w_sum = 0.0;
    for i in 0..n {
        for j in 0..n {
            numer += w[[i, j]] * dev[i] * dev[j];
            w_sum += w[[i, j]];
        }
    }
    Ok((n as f64 / w_sum) * (numer / denom))
}

/// One-sided permutation test for positive spatial autocorrelation.
/// Returns (observed I, p-value with the +1 correction).
pub fn morans_i_permutation_test(
    values: &[f64],
    positions: &Array2<f64>,
    k: usize,
    n_perms: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if n_perms == 0 {
        return Err(Error::invalid("need at least one permutation"));
    }
    let observed = morans_i(values, positions, k)?;
    let mut rng = child_rng(seed, &[0x4d4f52414e]);
    let mut shuffled = values.to_vec();
    let mut at_least = 0usize;
    for _ in 0..n_perms {
        for i in (1..shuffled.len()).rev() {
            let j = rng.gen_range(0..=i);
            shuffled.swap(i, j);
        }
        if morans_i(&shuffled, positions, k)? >= observed {
            at_least += 1;
        }
    }
    let p = (1 + at_least) as f64 / (1 + n_perms) as f64;
    Ok((observed, p))
}

/// Map t in [0,1] to a dark-blue -> teal -> yellow color ramp.
fn ramp_color(t: f64) -> (u8, u8, u8) {
    let t = t.clamp(0.0, 1.0);
    let stops: [(f64, [f64; 3]); 4] = [
        (0.0, [68.0, 1.0, 84.0]),
        (0.33, [49.0, 104.0, 142.0]),
        (0.66, [53.0, 183.0, 121.0]),
        (1.0, [253.0, 231.0, 37.0]),
    ];
    for w in stops.windows(2) {
        let (t0, c0) = w[0];
        let (t1, c1) = w[1];
        if t <= t1 {
            let f = if t1 > t0 { (t - t0) / (t1 - t0) } else { 0.0 };
            return (
                (c0[0] + f * (c1[0] - c0[0])).round() as u8,
                (c0[1] + f * (c1[1] - c0[1])).round() as u8,
                (c0[2] + f * (c1[2] - c0[2])).round() as u8,
            );
        }
    }
    (253, 231, 37)
}

/// Write a scatter plot of 2D `coords` colored by `values` as a standalone
/// SVG with a vertical colorbar. With `log_scale`, colors follow
/// ln(1 + value) (values must be >= 0).
pub fn emit_scatter(
    path: &std::path::Path,
    coords: &Array2<f64>,
    values: &[f64],
    title: &str,
    log_scale: bool,
) -> Result<()> {
    let n = coords.nrows();
    if n == 0 || n != values.len() {
        return Err(Error::invalid(
            "scatter needs nonzero coords with matching values",
        ));
    }
    if coords.ncols() != 2 {
        return Err(Error::invalid("scatter coords must be n x 2"));
    }
    if log_scale && values.iter().any(|&v| v < 0.0) {
        return Err(Error::invalid("log-scale coloring needs nonnegative values"));
    }
    let tv: Vec<f64> = values
        .iter()
        .map(|&v| if log_scale { v.ln_1p() } else { v })
        .collect();
    let (vmin, vmax) = tv
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let vspan = if vmax > vmin { vmax - vmin } else { 1.0 };

    let (width, height, margin) = (760.0, 600.0, 50.0);
    let plot_w = width - 2.0 * margin - 70.0; // leave room for the colorbar
    let plot_h = height - 2.0 * margin;
    let (mut xmin, mut xmax, mut ymin, mut ymax) =
        (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for i in 0..n {
        xmin = xmin.min(coords[[i, 0]]);
        xmax = xmax.max(coords[[i, 0]]);
        ymin = ymin.min(coords[[i, 1]]);
        ymax = ymax.max(coords[[i, 1]]);
    }
    let xspan = if xmax > xmin { xmax - xmin } else { 1.0 };
    let yspan = if ymax > ymin { ymax - ymin } else { 1.0 };

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\">\n"
    ));
    svg.push_str(&format!(
        "  <rect width=\"{width}\" height=\"{height}\" fill=\"white\"/>\n"
    ));
    svg.push_str(&format!(
        "  <text x=\"{}\" y=\"28\" font-family=\"sans-serif\" font-size=\"16\" \
         text-anchor=\"middle\">{}</text>\n",
        margin + plot_w / 2.0,
        title
    ));
    for i in 0..n {
        let px = margin + (coords[[i, 0]] - xmin) / xspan * plot_w;
        let py = margin + (1.0 - (coords[[i, 1]] - ymin) / yspan) * plot_h;
        let (r, g, b) = ramp_color((tv[i] - vmin) / vspan);
        svg.push_str(&format!(
            "  <circle cx=\"{px:.2}\" cy=\"{py:.2}\" r=\"3\" fill=\"rgb({r},{g},{b})\" \
             fill-opacity=\"0.85\"/>\n"
        ));
    }
    // colorbar: stacked segments on the right
    let bar_x = margin + plot_w + 25.0;
    let segs = 64;
    for s in 0..segs {
        let t = 1.0 - (s as f64 + 0.5) / segs as f64;
        let (r, g, b) = ramp_color(t);
        let y0 = margin + plot_h * s as f64 / segs as f64;
        svg.push_str(&format!(
            "  <rect class=\"colorbar\" x=\"{bar_x:.1}\" y=\"{y0:.2}\" width=\"18\" \
             height=\"{:.2}\" fill=\"rgb({r},{g},{b})\"/>\n",
            plot_h / segs as f64 + 0.5
        ));
    }
    let label = if log_scale { "ln(1+label)" } else { "label" };
    svg.push_str(&format!(
        "  <text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"11\" \
         text-anchor=\"middle\" transform=\"rotate(90 {:.1} {:.1})\">{label}</text>\n",
        bar_x + 40.0,
        margin + plot_h / 2.0,
        bar_x + 40.0,
        margin + plot_h / 2.0
    ));
    svg.push_str(&format!(
        "  <text x=\"{bar_x:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"10\">{vmax:.3}</text>\n",
        margin - 6.0
    ));
    svg.push_str(&format!(
        "  <text x=\"{bar_x:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"10\">{vmin:.3}</text>\n",
        margin + plot_h + 14.0
    ));
    svg.push_str("</svg>\n");
    std::fs::write(path, svg).map_err(|e| Error::io(path, e))
}
