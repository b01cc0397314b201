//! Closed-form linear reconstruction analysis.
//!
//! Data lives in columns: a client's samples form X [d, n], the m corruption
//! variants are stacked as X-tilde = [V_1 | ... | V_m] with d x (n*m), and
//! X-bar repeats X m times to line up column for column. The closed-form
//! optimum W* = X-bar X-tilde^T (X-tilde X-tilde^T + lambda I)^-1 minimizes
//! the column-normalized ridge objective; a gradient-descent oracle and
//! random probes check it from the outside.
//!
//! Corruption here acts on the flattened vector: the d coordinates are split
//! into `num_patches` contiguous groups and whole groups are zeroed, matching
//! the patch-level masking of the model path.

use crate::data::MaskSemantics;
use crate::error::{Error, Result};
use crate::linalg::{linear_solve_ridge, truncated_factorize};
use crate::rng::RngStream;
use crate::tensor::{matmul, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct CorruptionSpec {
    pub semantics: MaskSemantics,
    /// Masking probability (Bernoulli) or masked fraction (fixed-count).
    pub p: f64,
    /// Number of coordinate groups; must divide d.
    pub num_patches: usize,
}

#[derive(Debug, Clone)]
pub struct LinearAEProblem {
    pub dim: usize,
    pub samples: usize,
    pub variants: usize,
    pub spec: CorruptionSpec,
    /// Original data, [d, n].
    pub x: Tensor,
    /// Aggregated corrupted variants, [d, n*m].
    pub x_tilde: Tensor,
    /// m-fold repetition of the originals, [d, n*m].
    pub x_bar: Tensor,
}

#[derive(Debug, Clone)]
pub struct LinearSolution {
    pub w: Tensor,
    pub lambda: f64,
    /// Column-normalized ridge objective at `w`.
    pub residual: f64,
}

/// Masked coordinate groups for one corruption draw.
fn draw_mask(spec: &CorruptionSpec, rng: &mut RngStream) -> Vec<bool> {
    let b = spec.num_patches;
    let mut masked = vec![false; b];
    match spec.semantics {
        MaskSemantics::Bernoulli => {
            for flag in masked.iter_mut() {
                *flag = rng.next_f64() < spec.p;
            }
        }
        MaskSemantics::FixedCount => {
            let visible = crate::data::fixed_visible_count(b, spec.p);
            let keep = rng.choose_k(b, visible);
            masked.iter_mut().for_each(|f| *f = true);
            for &k in &keep {
                masked[k] = false;
            }
        }
    }
    masked
}

/// m independent corruptions of every column of `x` ([d, n]).
pub fn build_problem(
    x: &Tensor,
    variants: usize,
    spec: CorruptionSpec,
    rng: &mut RngStream,
) -> Result<LinearAEProblem> {
    if x.shape().len() != 2 {
        return Err(Error::Shape(format!("expected [d, n] data, got {:?}", x.shape())));
    }
    let (d, n) = (x.shape()[0], x.shape()[1]);
    if variants == 0 {
        return Err(Error::Invalid("variant count m must be >= 1".into()));
    }
    if spec.num_patches == 0 || d % spec.num_patches != 0 {
        return Err(Error::Invalid(format!(
            "num_patches {} must divide dimension {d}",
            spec.num_patches
        )));
    }
    if !(0.0..1.0).contains(&spec.p) {
        return Err(Error::Invalid(format!("p={} outside [0, 1)", spec.p)));
    }
    let group = d / spec.num_patches;
    let cols = n * variants;
    let mut x_tilde = Tensor::zeros(&[d, cols]);
    let mut x_bar = Tensor::zeros(&[d, cols]);
    for v in 0..variants {
        for j in 0..n {
            let col = v * n + j;
            let masked = draw_mask(&spec, rng);
            for row in 0..d {
                let val = x.data()[row * n + j];
                x_bar.data_mut()[row * cols + col] = val;
                if !masked[row / group] {
                    x_tilde.data_mut()[row * cols + col] = val;
                }
            }
        }
    }
    Ok(LinearAEProblem {
        dim: d,
        samples: n,
        variants,
        spec,
        x: x.clone(),
        x_tilde,
        x_bar,
    })
}

/// (1/2 ||B - W A||_F^2 + lambda/2 ||W||_F^2) / ncols.
pub fn ridge_objective(w: &Tensor, a: &Tensor, b: &Tensor, lambda: f64) -> f64 {
    let (d_out, d_in) = (w.shape()[0], w.shape()[1]);
    let cols = a.shape()[1];
    let mut wa = vec![0.0; d_out * cols];
    matmul(w.data(), a.data(), d_out, d_in, cols, &mut wa);
    let fit: f64 = wa
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    (0.5 * fit + 0.5 * lambda * w.sq_norm()) / cols as f64
}

/// Default ridge when the caller passes none: 1e-8 * trace(A A^T) / d.
pub fn default_lambda(a: &Tensor) -> f64 {
    let d = a.shape()[0];
    1e-8 * a.sq_norm() / d as f64
}

/// Theorem-1 solution on one client's aggregated variants.
pub fn solve_client(problem: &LinearAEProblem, lambda: f64) -> Result<LinearSolution> {
    let w = linear_solve_ridge(&problem.x_tilde, &problem.x_bar, lambda)?;
    let residual = ridge_objective(&w, &problem.x_tilde, &problem.x_bar, lambda);
    Ok(LinearSolution { w, lambda, residual })
}

/// Theorem-2 solution: horizontally concatenate every client's variants and
/// solve the same system.
pub fn solve_global(problems: &[LinearAEProblem], lambda: f64) -> Result<LinearSolution> {
    let first = problems
        .first()
        .ok_or_else(|| Error::Invalid("global solve over zero clients".into()))?;
    let d = first.dim;
    if problems.iter().any(|p| p.dim != d) {
        return Err(Error::Shape("clients disagree on data dimension".into()));
    }
    let total: usize = problems.iter().map(|p| p.x_tilde.shape()[1]).sum();
    let mut a = Tensor::zeros(&[d, total]);
    let mut b = Tensor::zeros(&[d, total]);
    let mut offset = 0;
    for p in problems {
        let cols = p.x_tilde.shape()[1];
        for row in 0..d {
            a.data_mut()[row * total + offset..row * total + offset + cols]
                .copy_from_slice(&p.x_tilde.data()[row * cols..(row + 1) * cols]);
            b.data_mut()[row * total + offset..row * total + offset + cols]
                .copy_from_slice(&p.x_bar.data()[row * cols..(row + 1) * cols]);
        }
        offset += cols;
    }
    let w = linear_solve_ridge(&a, &b, lambda)?;
    let residual = ridge_objective(&w, &a, &b, lambda);
    Ok(LinearSolution { w, lambda, residual })
}

/// Independent oracle: full-batch gradient descent on the same objective from
/// a random start. The step size halves whenever a step would increase the
/// loss and creeps back up on success.
pub fn gd_linear_ae(
    problem: &LinearAEProblem,
    steps: usize,
    lr: f64,
    lambda: f64,
    rng: &mut RngStream,
) -> Result<Tensor> {
    let d = problem.dim;
    let cols = problem.x_tilde.shape()[1];
    let mut w = Tensor::zeros(&[d, d]);
    rng.fill_normal(w.data_mut(), 0.0, 0.01);
    if steps == 0 {
        return Ok(w);
    }
    let mut loss = ridge_objective(&w, &problem.x_tilde, &problem.x_bar, lambda);
    let mut lr = lr;
    let lr_cap = lr * 16.0;

    let mut wa = vec![0.0; d * cols];
    let mut grad = vec![0.0; d * d];
    let mut step = 0;
    while step < steps {
        // grad = ((W A - B) A^T + lambda W) / cols
        matmul(w.data(), problem.x_tilde.data(), d, d, cols, &mut wa);
        for (r, b) in wa.iter_mut().zip(problem.x_bar.data()) {
            *r -= b;
        }
        crate::tensor::matmul_bt(&wa, problem.x_tilde.data(), d, cols, d, &mut grad);
        for (g, &wv) in grad.iter_mut().zip(w.data()) {
            *g = (*g + lambda * wv) / cols as f64;
        }
        let gnorm: f64 = grad.iter().map(|g| g * g).sum();
        if gnorm.sqrt() < 1e-14 {
            break;
        }
        loop {
            let mut cand = w.clone();
            for (c, &g) in cand.data_mut().iter_mut().zip(&grad) {
                *c -= lr * g;
            }
            let cand_loss = ridge_objective(&cand, &problem.x_tilde, &problem.x_bar, lambda);
            if cand_loss.is_finite() && cand_loss <= loss {
                w = cand;
                loss = cand_loss;
                lr = (lr * 1.1).min(lr_cap);
                break;
            }
            lr *= 0.5;
            if lr < 1e-18 {
                return Err(Error::Job(
                    "gradient descent diverged: step size collapsed".into(),
                ));
            }
        }
        step += 1;
    }
    Ok(w)
}

/// Best rank-r split of a composite map into decoder x encoder factors.
pub fn rank_one_factorize(w_star: &Tensor, rank: usize) -> Result<(Tensor, Tensor, f64)> {
    truncated_factorize(w_star, rank)
}

#[derive(Debug, Clone)]
pub struct EquivalenceRecord {
    /// max |Delta z - W_h (x - x_tilde)| over coordinates.
    pub max_deviation: f64,
    pub interference_norm: f64,
}

/// For a linear map the corruption-interference identity is exact:
/// z - z_tilde = W_h (x - x_tilde). Verifies it on one (x, mask) pair.
pub fn corruption_equivalence(w_h: &Tensor, x: &[f64], masked: &[bool]) -> Result<EquivalenceRecord> {
    let (r, d) = (w_h.shape()[0], w_h.shape()[1]);
    if x.len() != d || masked.len() != d {
        return Err(Error::Shape("x and mask must have length d".into()));
    }
    let x_tilde: Vec<f64> = x
        .iter()
        .zip(masked)
        .map(|(&v, &m)| if m { 0.0 } else { v })
        .collect();
    let diff: Vec<f64> = x.iter().zip(&x_tilde).map(|(a, b)| a - b).collect();

    let mut z = vec![0.0; r];
    let mut z_tilde = vec![0.0; r];
    let mut direct = vec![0.0; r];
    matmul(w_h.data(), x, r, d, 1, &mut z);
    matmul(w_h.data(), &x_tilde, r, d, 1, &mut z_tilde);
    matmul(w_h.data(), &diff, r, d, 1, &mut direct);

    let mut max_dev = 0.0f64;
    let mut norm = 0.0f64;
    for i in 0..r {
        let dz = z[i] - z_tilde[i];
        max_dev = max_dev.max((dz - direct[i]).abs());
        norm += dz * dz;
    }
    Ok(EquivalenceRecord {
        max_deviation: max_dev,
        interference_norm: norm.sqrt(),
    })
}

#[derive(Debug, Clone)]
pub struct GapReport {
    /// Relative residual of the best linear fit to the trained model's
    /// reconstructions (the measured epsilon proxy).
    pub fit_residual_rel: f64,
    /// Column-normalized reconstruction loss of the model itself.
    pub model_loss: f64,
    /// Loss of the best linear fit to the model, against the ground truth.
    pub linear_fit_loss: f64,
    /// Loss of the closed-form optimum on the same corruptions.
    pub closed_form_loss: f64,
}

/// Measure how far the trained autoencoder is from its best linear
/// approximation, and compare both against the closed-form optimum W* on the
/// same corruptions. No threshold is asserted; the report is diagnostic.
pub fn linearization_gap(
    mae: &crate::mae::MaeParams,
    patches: &crate::data::PatchSequence,
    plans: &[crate::data::MaskPlan],
    lambda: f64,
) -> Result<GapReport> {
    if patches.n == 0 || plans.is_empty() {
        return Err(Error::Invalid("linearization gap needs data and masks".into()));
    }
    let d = patches.num_patches() * patches.patch_dim();
    let cols = patches.n * plans.len();
    let mut x_tilde = Tensor::zeros(&[d, cols]);
    let mut x_bar = Tensor::zeros(&[d, cols]);
    let mut y_hat = Tensor::zeros(&[d, cols]);

    for (v, plan) in plans.iter().enumerate() {
        let corrupted = crate::data::apply_mask_zero(patches, plan)?;
        let fwd = crate::mae::mae_forward(mae, patches, plan)?;
        for j in 0..patches.n {
            let col = v * patches.n + j;
            for row in 0..d {
                x_bar.data_mut()[row * cols + col] = patches.data[j * d + row];
                x_tilde.data_mut()[row * cols + col] = corrupted.data[j * d + row];
                y_hat.data_mut()[row * cols + col] = fwd.recon[j * d + row];
            }
        }
    }

    // Best linear map from corrupted inputs to the model's reconstructions.
    let m_fit = linear_solve_ridge(&x_tilde, &y_hat, lambda)?;
    let mut fit = vec![0.0; d * cols];
    matmul(m_fit.data(), x_tilde.data(), d, d, cols, &mut fit);
    let num: f64 = fit
        .iter()
        .zip(y_hat.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let fit_residual_rel = (num / y_hat.sq_norm().max(1e-300)).sqrt();

    let model_loss = {
        let err: f64 = y_hat
            .data()
            .iter()
            .zip(x_bar.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        0.5 * err / cols as f64
    };
    let linear_fit_loss = ridge_objective(&m_fit, &x_tilde, &x_bar, 0.0);
    let w_star = linear_solve_ridge(&x_tilde, &x_bar, lambda)?;
    let closed_form_loss = ridge_objective(&w_star, &x_tilde, &x_bar, 0.0);

    Ok(GapReport {
        fit_residual_rel,
        model_loss,
        linear_fit_loss,
        closed_form_loss,
    })
}

/// Gaussian random problem, the workhorse for oracle sweeps.
pub fn random_problem(
    d: usize,
    n: usize,
    m: usize,
    spec: CorruptionSpec,
    rng: &mut RngStream,
) -> Result<LinearAEProblem> {
    let mut x = Tensor::zeros(&[d, n]);
    rng.fill_normal(x.data_mut(), 0.0, 1.0);
    build_problem(&x, m, spec, rng)
}

#[derive(Debug, Clone)]
pub struct OracleRow {
    pub clients: usize,
    pub samples: usize,
    pub variants: usize,
    pub p: f64,
    pub lambda: f64,
    pub residual_closed_form: f64,
    pub residual_gd: f64,
    pub gap: f64,
}

pub fn oracle_csv_header() -> &'static str {
    "K,n,m,p,lambda,residual_closed_form,residual_gd,gap"
}

impl OracleRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{:.12e},{:.12e},{:.12e}",
            self.clients,
            self.samples,
            self.variants,
            self.p,
            self.lambda,
            self.residual_closed_form,
            self.residual_gd,
            self.gap
        )
    }
}

/// One oracle sweep point: K random clients, closed form vs gradient descent.
pub fn run_oracle_case(
    clients: usize,
    d: usize,
    n: usize,
    m: usize,
    spec: CorruptionSpec,
    lambda: f64,
    gd_steps: usize,
    rng: &mut RngStream,
) -> Result<OracleRow> {
    let problems: Vec<LinearAEProblem> = (0..clients)
        .map(|k| random_problem(d, n, m, spec, &mut rng.derive("client", k as u64)))
        .collect::<Result<_>>()?;
    let global = solve_global(&problems, lambda)?;

    // GD on the concatenated problem.
    let mut concat_cols = 0;
    for p in &problems {
        concat_cols += p.x_tilde.shape()[1];
    }
    let mut joined = LinearAEProblem {
        dim: d,
        samples: concat_cols,
        variants: 1,
        spec,
        x: Tensor::zeros(&[d, concat_cols]),
        x_tilde: Tensor::zeros(&[d, concat_cols]),
        x_bar: Tensor::zeros(&[d, concat_cols]),
    };
    let mut offset = 0;
    for p in &problems {
        let cols = p.x_tilde.shape()[1];
        for row in 0..d {
            joined.x_tilde.data_mut()[row * concat_cols + offset..row * concat_cols + offset + cols]
                .copy_from_slice(&p.x_tilde.data()[row * cols..(row + 1) * cols]);
            joined.x_bar.data_mut()[row * concat_cols + offset..row * concat_cols + offset + cols]
                .copy_from_slice(&p.x_bar.data()[row * cols..(row + 1) * cols]);
        }
        offset += cols;
    }
    let w_gd = gd_linear_ae(&joined, gd_steps, 0.5, lambda, &mut rng.derive("gd", 0))?;
    let residual_gd = ridge_objective(&w_gd, &joined.x_tilde, &joined.x_bar, lambda);

    Ok(OracleRow {
        clients,
        samples: n,
        variants: m,
        p: spec.p,
        lambda,
        residual_closed_form: global.residual,
        residual_gd,
        gap: residual_gd - global.residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(p: f64, b: usize, semantics: MaskSemantics) -> CorruptionSpec {
        CorruptionSpec {
            semantics,
            p,
            num_patches: b,
        }
    }

    #[test]
    fn no_corruption_means_tilde_equals_bar() {
        let mut rng = RngStream::new(1);
        let prob = random_problem(6, 4, 3, spec(0.0, 3, MaskSemantics::Bernoulli), &mut rng).unwrap();
        assert_eq!(prob.x_tilde.data(), prob.x_bar.data());
        assert_eq!(prob.x_tilde.shape(), &[6, 12]);
    }

    #[test]
    fn one_variant_has_n_columns() {
        let mut rng = RngStream::new(2);
        let prob = random_problem(4, 5, 1, spec(0.5, 4, MaskSemantics::Bernoulli), &mut rng).unwrap();
        assert_eq!(prob.x_tilde.shape(), &[4, 5]);
    }

    #[test]
    fn bar_columns_repeat_originals() {
        let mut rng = RngStream::new(3);
        let prob = random_problem(4, 3, 5, spec(0.5, 2, MaskSemantics::FixedCount), &mut rng).unwrap();
        let cols = 15;
        for col in 0..cols {
            let j = col % 3;
            for row in 0..4 {
                assert_eq!(
                    prob.x_bar.data()[row * cols + col],
                    prob.x.data()[row * 3 + j]
                );
            }
        }
    }

    #[test]
    fn distinct_columns_bounded_by_prop4() {
        // d=4 scalar groups, fixed-count b=1 visible, n=1: at most C(4,1)=4
        // distinct corrupted columns no matter how many variants are drawn.
        let mut rng = RngStream::new(4);
        let x = Tensor::from_vec(&[4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let prob = build_problem(&x, 64, spec(0.75, 4, MaskSemantics::FixedCount), &mut rng).unwrap();
        let cols = 64;
        let mut seen = std::collections::BTreeSet::new();
        for col in 0..cols {
            let column: Vec<u64> = (0..4)
                .map(|row| prob.x_tilde.data()[row * cols + col].to_bits())
                .collect();
            seen.insert(column);
        }
        let bound = crate::data::count_mask_variants(1, 4, 1).unwrap() as usize;
        assert!(seen.len() <= bound, "{} distinct > C(4,1)={bound}", seen.len());
        assert_eq!(seen.len(), bound, "all 4 variants should appear in 64 draws");
    }

    #[test]
    fn identity_recovery_without_corruption() {
        let mut rng = RngStream::new(5);
        let prob = random_problem(5, 40, 1, spec(0.0, 5, MaskSemantics::Bernoulli), &mut rng).unwrap();
        let sol = solve_client(&prob, 0.0).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((sol.w.data()[i * 5 + j] - want).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn closed_form_beats_gd_and_random_probes() {
        let mut rng = RngStream::new(6);
        let prob = random_problem(3, 5, 20, spec(0.5, 3, MaskSemantics::Bernoulli), &mut rng).unwrap();
        let lambda = 1e-8;
        let sol = solve_client(&prob, lambda).unwrap();
        let w_gd = gd_linear_ae(&prob, 4000, 0.5, lambda, &mut rng.derive("gd", 0)).unwrap();
        let gd_res = ridge_objective(&w_gd, &prob.x_tilde, &prob.x_bar, lambda);
        assert!(
            sol.residual <= gd_res + 1e-6,
            "closed form {} vs gd {gd_res}",
            sol.residual
        );
        for probe in 0..1000 {
            let mut w = Tensor::zeros(&[3, 3]);
            rng.derive("probe", probe).fill_normal(w.data_mut(), 0.0, 1.0);
            let r = ridge_objective(&w, &prob.x_tilde, &prob.x_bar, lambda);
            assert!(sol.residual <= r + 1e-12);
        }
    }

    #[test]
    fn gd_converges_to_closed_form_on_toy() {
        let mut rng = RngStream::new(7);
        let prob = random_problem(3, 6, 20, spec(0.5, 3, MaskSemantics::Bernoulli), &mut rng).unwrap();
        let lambda = default_lambda(&prob.x_tilde);
        let sol = solve_client(&prob, lambda).unwrap();
        let w_gd = gd_linear_ae(&prob, 20000, 0.5, lambda, &mut rng.derive("gd", 1)).unwrap();
        let diff: f64 = sol
            .w
            .data()
            .iter()
            .zip(w_gd.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let rel = diff / sol.w.sq_norm().sqrt();
        assert!(rel < 1e-3, "relative distance {rel}");
    }

    #[test]
    fn gd_zero_steps_returns_init() {
        let mut rng = RngStream::new(8);
        let prob = random_problem(3, 4, 2, spec(0.25, 3, MaskSemantics::Bernoulli), &mut rng).unwrap();
        let mut rng_a = rng.derive("gd", 0);
        let mut rng_b = rng.derive("gd", 0);
        let w0 = gd_linear_ae(&prob, 0, 0.1, 1e-8, &mut rng_a).unwrap();
        let mut expect = Tensor::zeros(&[3, 3]);
        rng_b.fill_normal(expect.data_mut(), 0.0, 0.01);
        assert_eq!(w0.data(), expect.data());
    }

    #[test]
    fn global_equals_client_on_duplicated_clients() {
        // K identical clients (same data, same corruption draws) leave the
        // least-squares optimum unchanged.
        let mut rng = RngStream::new(9);
        let prob = random_problem(4, 5, 6, spec(0.5, 4, MaskSemantics::Bernoulli), &mut rng).unwrap();
        let lambda = 1e-8;
        let client = solve_client(&prob, lambda).unwrap();
        let trio = vec![prob.clone(), prob.clone(), prob.clone()];
        let global = solve_global(&trio, 3.0 * lambda).unwrap();
        // Duplication scales X X^T by 3; scaling lambda alike keeps W*.
        let diff: f64 = client
            .w
            .data()
            .iter()
            .zip(global.w.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-10, "max diff {diff}");
    }

    #[test]
    fn global_is_client_on_concatenation() {
        let mut rng = RngStream::new(10);
        let problems: Vec<LinearAEProblem> = (0..3)
            .map(|k| {
                random_problem(
                    4,
                    4,
                    5,
                    spec(0.5, 4, MaskSemantics::Bernoulli),
                    &mut rng.derive("c", k),
                )
                .unwrap()
            })
            .collect();
        let lambda = 1e-6;
        let global = solve_global(&problems, lambda).unwrap();

        // Manual concatenation solved directly through the ridge solver.
        let cols: usize = 3 * 20;
        let mut a = Tensor::zeros(&[4, cols]);
        let mut b = Tensor::zeros(&[4, cols]);
        for (k, p) in problems.iter().enumerate() {
            for row in 0..4 {
                for c in 0..20 {
                    a.data_mut()[row * cols + k * 20 + c] = p.x_tilde.data()[row * 20 + c];
                    b.data_mut()[row * cols + k * 20 + c] = p.x_bar.data()[row * 20 + c];
                }
            }
        }
        let direct = linear_solve_ridge(&a, &b, lambda).unwrap();
        let rel = {
            let num: f64 = global
                .w
                .data()
                .iter()
                .zip(direct.data())
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            (num / direct.sq_norm()).sqrt()
        };
        assert!(rel < 1e-10, "rel {rel}");
    }

    #[test]
    fn equivalence_identity_cases() {
        let mut rng = RngStream::new(11);
        let mut w = Tensor::zeros(&[3, 6]);
        rng.fill_normal(w.data_mut(), 0.0, 1.0);
        let x: Vec<f64> = (0..6).map(|_| rng.normal()).collect();

        let none = corruption_equivalence(&w, &x, &[false; 6]).unwrap();
        assert_eq!(none.interference_norm, 0.0);

        let full = corruption_equivalence(&w, &x, &[true; 6]).unwrap();
        let mut z = vec![0.0; 3];
        matmul(w.data(), &x, 3, 6, 1, &mut z);
        let znorm: f64 = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((full.interference_norm - znorm).abs() < 1e-12);

        for trial in 0..100 {
            let mut trng = rng.derive("trial", trial);
            let x: Vec<f64> = (0..6).map(|_| trng.normal()).collect();
            let masked: Vec<bool> = (0..6).map(|_| trng.next_f64() < 0.5).collect();
            let rec = corruption_equivalence(&w, &x, &masked).unwrap();
            assert!(rec.max_deviation <= 1e-12, "deviation {}", rec.max_deviation);
        }
    }

    #[test]
    fn factorization_is_reexported_svd() {
        let mut rng = RngStream::new(12);
        let mut w = Tensor::zeros(&[4, 4]);
        rng.fill_normal(w.data_mut(), 0.0, 1.0);
        let (g, h, err) = rank_one_factorize(&w, 4).unwrap();
        assert_eq!(g.shape(), &[4, 4]);
        assert_eq!(h.shape(), &[4, 4]);
        assert!(err < 1e-10);
    }

    #[test]
    fn linear_surrogate_has_no_gap() {
        // If reconstructions come from an exactly linear map, the fit
        // residual vanishes.
        let mut rng = RngStream::new(13);
        let d = 6;
        let cols = 30;
        let mut x_tilde = Tensor::zeros(&[d, cols]);
        rng.fill_normal(x_tilde.data_mut(), 0.0, 1.0);
        let mut m0 = Tensor::zeros(&[d, d]);
        rng.fill_normal(m0.data_mut(), 0.0, 1.0);
        let mut y = Tensor::zeros(&[d, cols]);
        matmul(m0.data(), x_tilde.data(), d, d, cols, y.data_mut());

        let fit = linear_solve_ridge(&x_tilde, &y, 0.0).unwrap();
        let mut recon = vec![0.0; d * cols];
        matmul(fit.data(), x_tilde.data(), d, d, cols, &mut recon);
        let num: f64 = recon
            .iter()
            .zip(y.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let rel = (num / y.sq_norm()).sqrt();
        assert!(rel < 1e-8, "rel {rel}");
    }

    #[test]
    fn gap_report_on_tiny_mae() {
        use crate::data::{patchify, sample_mask, synth_dataset};
        let mut rng = RngStream::new(14);
        let ds = synth_dataset(3, 2, 4, 4, 0.2, &mut rng).unwrap();
        let patches = patchify(&ds, 2).unwrap();
        let dims = crate::mae::MaeDims {
            patch_dim: 4,
            num_patches: 4,
            d_enc: 8,
            d_dec: 4,
            n_heads_enc: 2,
            n_heads_dec: 2,
        };
        let mae = crate::mae::MaeParams::init(dims, &mut rng);
        let plans: Vec<_> = (0..4)
            .map(|i| {
                sample_mask(
                    patches.n,
                    4,
                    0.5,
                    MaskSemantics::FixedCount,
                    &mut rng.derive("plan", i),
                )
                .unwrap()
            })
            .collect();
        let report = linearization_gap(&mae, &patches, &plans, 1e-8).unwrap();
        assert!(report.fit_residual_rel.is_finite());
        assert!(report.model_loss.is_finite());
        // Optimality of W* against the linear fit:
        assert!(report.closed_form_loss <= report.linear_fit_loss + 1e-9);
    }

    #[test]
    fn oracle_case_runs_and_reports() {
        let mut rng = RngStream::new(15);
        let row = run_oracle_case(
            2,
            4,
            4,
            6,
            spec(0.5, 4, MaskSemantics::Bernoulli),
            1e-8,
            2000,
            &mut rng,
        )
        .unwrap();
        assert!(row.gap >= -1e-6, "gap {}", row.gap);
        assert!(row.to_csv().split(',').count() == 8);
    }
}
