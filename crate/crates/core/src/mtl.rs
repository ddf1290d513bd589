//! Multi-task objective: masked per-task losses, the task-covariance
//! regularizer `½λ₁·Tr(Φ Ω⁻¹ Φᵀ) + ½Σ λ_χ‖χ‖²`, its task-head gradient,
//! and the closed-form and neighbourhood updates of Ω.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gnn::ParamGroup;
use crate::graph::TaskType;
use crate::tensor::{regularized_inverse, sym_eig, GradTape, Matrix, Var};

/// Frobenius weights per parameter group.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GroupWeights {
    pub theta: f64,
    pub psi: f64,
    pub pool: f64,
    pub task: f64,
}

impl GroupWeights {
    pub fn get(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Theta => self.theta,
            ParamGroup::Psi => self.psi,
            ParamGroup::Pool => self.pool,
            ParamGroup::Task => self.task,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MtlConfig {
    pub lambda1: f64,
    pub lambda_chi: GroupWeights,
    pub omega_lr: f64,
    pub epsilon_psd: f64,
    /// Use raw `1/N_i` neighbourhood weights instead of weights normalized
    /// to sum to one.
    pub unnormalized_sample_weights: bool,
}

impl Default for MtlConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.001,
            lambda_chi: GroupWeights::default(),
            omega_lr: 1.0,
            epsilon_psd: 1e-6,
            unnormalized_sample_weights: false,
        }
    }
}

impl MtlConfig {
    pub fn validate(&self) -> Result<()> {
        let w = self.lambda_chi;
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda_chi.theta", w.theta),
            ("lambda_chi.psi", w.psi),
            ("lambda_chi.pool", w.pool),
            ("lambda_chi.task", w.task),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        if !(self.omega_lr.is_finite() && self.omega_lr > 0.0) {
            return Err(Error::Config(format!(
                "omega_lr must be positive, got {}",
                self.omega_lr
            )));
        }
        if !(self.epsilon_psd.is_finite() && self.epsilon_psd > 0.0) {
            return Err(Error::Config(format!(
                "epsilon_psd must be positive, got {}",
                self.epsilon_psd
            )));
        }
        Ok(())
    }
}

/// A unit-trace PSD task covariance over an ordered set of global task ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskCovariance {
    pub omega: Matrix,
    pub task_ids: Vec<usize>,
}

const COV_TOL: f64 = 1e-10;

impl TaskCovariance {
    pub fn new(omega: Matrix, task_ids: Vec<usize>) -> Result<Self> {
        let cov = TaskCovariance { omega, task_ids };
        cov.validate()?;
        Ok(cov)
    }

    /// `I / S`.
    pub fn uniform(task_ids: &[usize]) -> Result<Self> {
        if task_ids.is_empty() {
            return Err(Error::Validation("task covariance over zero tasks".into()));
        }
        let s = task_ids.len();
        TaskCovariance::new(Matrix::identity(s).scale(1.0 / s as f64), task_ids.to_vec())
    }

    pub fn validate(&self) -> Result<()> {
        check_ids(&self.task_ids)?;
        let s = self.task_ids.len();
        if self.omega.shape() != (s, s) {
            return Err(Error::Shape(format!(
                "omega is {:?} for {s} tasks",
                self.omega.shape()
            )));
        }
        if !self.omega.is_symmetric(COV_TOL) {
            return Err(Error::Validation("omega is not symmetric".into()));
        }
        if (self.omega.trace() - 1.0).abs() > COV_TOL {
            return Err(Error::Validation(format!(
                "omega trace is {}, expected 1",
                self.omega.trace()
            )));
        }
        check_psd(&self.omega)
    }
}

fn check_ids(ids: &[usize]) -> Result<()> {
    if ids.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Validation(
            "task ids must be strictly increasing".into(),
        ));
    }
    Ok(())
}

fn check_psd(m: &Matrix) -> Result<()> {
    let eig = sym_eig(m)?;
    let min = eig.values.last().copied().unwrap_or(0.0);
    if min < -COV_TOL {
        return Err(Error::Validation(format!(
            "omega is not PSD (min eigenvalue {min})"
        )));
    }
    Ok(())
}

/// Per-column targets and weights for one sample restricted to the head
/// columns `task_ids`. Unmasked tasks share weight equally.
pub fn loss_weights(
    label: &[f64],
    mask: &[bool],
    task_ids: &[usize],
) -> Result<(Vec<f64>, Vec<f64>)> {
    if label.len() != mask.len() {
        return Err(Error::Shape("label and mask lengths differ".into()));
    }
    let mut target = Vec::with_capacity(task_ids.len());
    let mut weight = Vec::with_capacity(task_ids.len());
    for &t in task_ids {
        if t >= label.len() {
            return Err(Error::Alignment(format!(
                "head column for task {t} beyond {} labels",
                label.len()
            )));
        }
        target.push(label[t]);
        weight.push(if mask[t] { 1.0 } else { 0.0 });
    }
    let used = weight.iter().filter(|w| **w != 0.0).count();
    if used > 0 {
        let share = 1.0 / used as f64;
        for w in &mut weight {
            *w *= share;
        }
    }
    Ok((target, weight))
}

/// Mean over unmasked tasks of BCE-with-logits or squared error.
/// A sample with every task masked contributes exactly 0.
pub fn masked_loss(
    tape: &mut GradTape,
    predictions: Var,
    label: &[f64],
    mask: &[bool],
    task_ids: &[usize],
    task_type: TaskType,
) -> Result<Var> {
    let (target, weight) = loss_weights(label, mask, task_ids)?;
    match task_type {
        TaskType::Classification => tape.bce_with_logits(predictions, &target, &weight),
        TaskType::Regression => tape.weighted_squared_error(predictions, &target, &weight),
    }
}

/// `½λ₁·Tr(Φ (Ω+εI)⁻¹ Φᵀ) + ½λ_task‖Φ‖²` for the task head alone; the
/// other groups' Frobenius terms are added on the tape by the caller.
pub fn regularizer_value(
    phi_task: &Matrix,
    omega: &TaskCovariance,
    cfg: &MtlConfig,
) -> Result<f64> {
    omega.validate()?;
    if phi_task.cols() != omega.task_ids.len() {
        return Err(Error::Alignment(format!(
            "task head has {} columns, omega covers {} tasks",
            phi_task.cols(),
            omega.task_ids.len()
        )));
    }
    let inv = regularized_inverse(&omega.omega, cfg.epsilon_psd)?;
    Ok(0.5 * cfg.lambda1 * quad_trace(phi_task, &inv)?
        + 0.5 * cfg.lambda_chi.task * phi_task.frobenius_sq())
}

/// `Tr(X A Xᵀ)`.
pub fn quad_trace(x: &Matrix, a: &Matrix) -> Result<f64> {
    Ok(x.matmul(a)?.hadamard(x)?.sum())
}

/// Neighbourhood weights from sample counts: `1/N_i`, optionally
/// normalized to sum to one.
pub fn sample_weights(counts: &[usize], normalized: bool) -> Result<Vec<f64>> {
    if counts.contains(&0) {
        return Err(Error::Validation("neighbour with zero samples".into()));
    }
    let raw: Vec<f64> = counts.iter().map(|&n| 1.0 / n as f64).collect();
    if !normalized {
        return Ok(raw);
    }
    let total: f64 = raw.iter().sum();
    Ok(raw.iter().map(|w| w / total).collect())
}

/// `(Ω_i+εI)⁻¹` restricted to the tasks neighbour `i` shares with
/// `target_ids`, placed at those columns; rows and columns of tasks the
/// neighbour does not cover are zero.
pub fn aligned_inverse(cov: &TaskCovariance, target_ids: &[usize], eps: f64) -> Result<Matrix> {
    check_ids(&cov.task_ids).map_err(|e| Error::Alignment(e.to_string()))?;
    check_ids(target_ids).map_err(|e| Error::Alignment(e.to_string()))?;
    let mut src = Vec::new();
    let mut dst = Vec::new();
    for (j, t) in target_ids.iter().enumerate() {
        if let Ok(i) = cov.task_ids.binary_search(t) {
            src.push(i);
            dst.push(j);
        }
    }
    let s = target_ids.len();
    let mut out = Matrix::zeros(s, s);
    if src.is_empty() {
        return Ok(out);
    }
    let inv = regularized_inverse(&cov.omega.select(&src, &src), eps)?;
    for (a, &ra) in dst.iter().enumerate() {
        for (b, &cb) in dst.iter().enumerate() {
            out.set(ra, cb, inv.get(a, b));
        }
    }
    Ok(out)
}

/// One neighbourhood member's covariance with its sample count.
pub type WeightedCovariance<'a> = (&'a TaskCovariance, usize);

/// `Σ_i w_i (Ω̃_i+εI)⁻¹` over the neighbourhood, aligned to `task_ids`.
pub fn neighborhood_inverse(
    neighborhood: &[WeightedCovariance<'_>],
    task_ids: &[usize],
    cfg: &MtlConfig,
) -> Result<Matrix> {
    if neighborhood.is_empty() {
        return Err(Error::Topology("empty neighbourhood".into()));
    }
    let counts: Vec<usize> = neighborhood.iter().map(|n| n.1).collect();
    let weights = sample_weights(&counts, !cfg.unnormalized_sample_weights)?;
    let s = task_ids.len();
    let mut acc = Matrix::zeros(s, s);
    for ((cov, _), w) in neighborhood.iter().zip(&weights) {
        acc.axpy(*w, &aligned_inverse(cov, task_ids, cfg.epsilon_psd)?)?;
    }
    Ok(acc)
}

/// Task-head part of the regularizer against a neighbourhood:
/// `½λ₁·Tr(Φ·Σ_i w_i Ω̃_i⁻¹·Φᵀ) + ½λ_task‖Φ‖²`. Its gradient is
/// [`grad_task_head`] minus the loss term.
pub fn neighborhood_regularizer(
    phi_task: &Matrix,
    task_ids: &[usize],
    neighborhood: &[WeightedCovariance<'_>],
    cfg: &MtlConfig,
) -> Result<f64> {
    let inv = neighborhood_inverse(neighborhood, task_ids, cfg)?;
    check_head(phi_task, task_ids)?;
    Ok(0.5 * cfg.lambda1 * quad_trace(phi_task, &inv)?
        + 0.5 * cfg.lambda_chi.task * phi_task.frobenius_sq())
}

fn check_head(phi: &Matrix, task_ids: &[usize]) -> Result<()> {
    if phi.cols() != task_ids.len() {
        return Err(Error::Alignment(format!(
            "task head has {} columns for {} task ids",
            phi.cols(),
            task_ids.len()
        )));
    }
    Ok(())
}

/// `∂L/∂Φ + λ₁ Σ_i w_i Φ Ω̃_i⁻¹ + λ_task Φ`.
pub fn grad_task_head(
    dl_dphi: &Matrix,
    phi_task: &Matrix,
    task_ids: &[usize],
    neighborhood: &[WeightedCovariance<'_>],
    cfg: &MtlConfig,
) -> Result<Matrix> {
    check_head(phi_task, task_ids)?;
    if dl_dphi.shape() != phi_task.shape() {
        return Err(Error::Shape(
            "loss gradient and task head shapes differ".into(),
        ));
    }
    let mut g = dl_dphi.clone();
    if cfg.lambda1 != 0.0 {
        let inv = neighborhood_inverse(neighborhood, task_ids, cfg)?;
        g.axpy(cfg.lambda1, &phi_task.matmul(&inv)?)?;
    }
    if cfg.lambda_chi.task != 0.0 {
        g.axpy(cfg.lambda_chi.task, phi_task)?;
    }
    Ok(g)
}

/// Principal square root of a symmetric PSD matrix; negative eigenvalues
/// from round-off are clamped to 0.
pub fn psd_sqrt(a: &Matrix) -> Result<Matrix> {
    let eig = sym_eig(a)?;
    let scale = eig.values.first().map(|v| v.abs()).unwrap_or(0.0).max(1.0);
    if let Some(&min) = eig.values.last() {
        if min < -1e-8 * scale {
            return Err(Error::Validation(format!(
                "matrix is not PSD (min eigenvalue {min})"
            )));
        }
    }
    Ok(eig.reconstruct_with(|v| v.max(0.0).sqrt()))
}

/// `(ΦᵀΦ)^{1/2} / Tr((ΦᵀΦ)^{1/2})`, the minimizer of `Tr(Φ Ω⁻¹ Φᵀ)`
/// over unit-trace PSD `Ω`.
pub fn omega_closed_form(phi_task: &Matrix, task_ids: &[usize]) -> Result<TaskCovariance> {
    check_head(phi_task, task_ids)?;
    if phi_task.frobenius_sq() == 0.0 {
        return Err(Error::Degenerate(
            "task head is zero; covariance undefined".into(),
        ));
    }
    let gram = phi_task.transpose().matmul(phi_task)?.symmetrize()?;
    let root = psd_sqrt(&gram)?.symmetrize()?;
    let tr = root.trace();
    if !(tr > 0.0 && tr.is_finite()) {
        return Err(Error::Degenerate(format!("covariance root has trace {tr}")));
    }
    Ok(TaskCovariance {
        omega: root.scale(1.0 / tr),
        task_ids: task_ids.to_vec(),
    })
}

/// Symmetrize, clamp eigenvalues at `eps`, renormalize trace to 1.
pub fn project_omega(m: &Matrix, eps: f64) -> Result<Matrix> {
    let eig = sym_eig(&m.symmetrize()?)?;
    let clamped = eig.reconstruct_with(|v| v.max(eps)).symmetrize()?;
    let tr = clamped.trace();
    Ok(clamped.scale(1.0 / tr))
}

/// Embeds a local covariance into `s_global × s_global` coordinates.
pub fn f_align(local: &TaskCovariance, s_global: usize) -> Result<Matrix> {
    check_global_ids(&local.task_ids, s_global)?;
    let mut out = Matrix::zeros(s_global, s_global);
    for (a, &ta) in local.task_ids.iter().enumerate() {
        for (b, &tb) in local.task_ids.iter().enumerate() {
            out.set(ta, tb, local.omega.get(a, b));
        }
    }
    Ok(out)
}

/// Inverse of [`f_align`]: the submatrix at `task_ids`.
pub fn extract_aligned(global: &Matrix, task_ids: &[usize]) -> Result<Matrix> {
    check_global_ids(task_ids, global.rows())?;
    if !global.is_square() {
        return Err(Error::Shape("aligned covariance must be square".into()));
    }
    Ok(global.select(task_ids, task_ids))
}

fn check_global_ids(ids: &[usize], s_global: usize) -> Result<()> {
    let mut seen = vec![false; s_global];
    for &t in ids {
        if t >= s_global {
            return Err(Error::Validation(format!(
                "task id {t} outside {s_global} global tasks"
            )));
        }
        if std::mem::replace(&mut seen[t], true) {
            return Err(Error::Validation(format!("duplicate task id {t}")));
        }
    }
    Ok(())
}

/// Neighbourhood update of client `own`'s covariance.
///
/// `neighborhood` lists every member including the client itself, with
/// sample counts. The client's own slot is filled by the fresh closed form
/// of `phi_task`; the others contribute their aligned covariances. The
/// weighted sum is scaled by `omega_lr` (and `1/|M_k|` with raw weights)
/// and then projected back onto unit-trace PSD matrices.
pub fn omega_decentralized_update(
    own: usize,
    neighborhood: &[WeightedCovariance<'_>],
    phi_task: &Matrix,
    task_ids: &[usize],
    s_global: usize,
    cfg: &MtlConfig,
) -> Result<TaskCovariance> {
    if neighborhood.is_empty() {
        return Err(Error::Topology("empty neighbourhood".into()));
    }
    if own >= neighborhood.len() {
        return Err(Error::Topology(format!(
            "own index {own} outside neighbourhood"
        )));
    }
    let fresh = omega_closed_form(phi_task, task_ids)?;
    let members: Vec<WeightedCovariance<'_>> = neighborhood
        .iter()
        .enumerate()
        .map(|(i, &(cov, n))| if i == own { (&fresh, n) } else { (cov, n) })
        .collect();
    omega_combine(&members, task_ids, s_global, cfg)
}

/// Weighted aligned-space combination of covariances, scaled by
/// `omega_lr` (and `1/|members|` with raw weights), restricted to
/// `task_ids` and projected onto unit-trace PSD matrices.
pub fn omega_combine(
    members: &[WeightedCovariance<'_>],
    task_ids: &[usize],
    s_global: usize,
    cfg: &MtlConfig,
) -> Result<TaskCovariance> {
    if members.is_empty() {
        return Err(Error::Topology("empty neighbourhood".into()));
    }
    let counts: Vec<usize> = members.iter().map(|n| n.1).collect();
    let normalized = !cfg.unnormalized_sample_weights;
    let weights = sample_weights(&counts, normalized)?;
    let mut acc = Matrix::zeros(s_global, s_global);
    for ((cov, _), w) in members.iter().zip(&weights) {
        acc.axpy(*w, &f_align(cov, s_global)?)?;
    }
    let mut scale = cfg.omega_lr;
    if !normalized {
        scale /= members.len() as f64;
    }
    let local = extract_aligned(&acc.scale(scale), task_ids)?;
    if local.trace() <= 0.0 {
        return Err(Error::Degenerate(
            "neighbourhood shares no tasks with the client".into(),
        ));
    }
    Ok(TaskCovariance {
        omega: project_omega(&local, cfg.epsilon_psd)?,
        task_ids: task_ids.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_matrix(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    fn random_cov(ids: &[usize], rng: &mut ChaCha8Rng) -> TaskCovariance {
        let a = rand_matrix(ids.len(), ids.len(), rng);
        let m = a.transpose().matmul(&a).unwrap();
        TaskCovariance::new(project_omega(&m, 1e-3).unwrap(), ids.to_vec()).unwrap()
    }

    #[test]
    fn fully_masked_sample_has_zero_loss_and_gradient() {
        let mut tape = GradTape::new();
        let z = tape.param(crate::tensor::ParamId(0), Matrix::row_vector(&[0.3, -2.0]));
        let l = masked_loss(
            &mut tape,
            z,
            &[1.0, 0.0],
            &[false, false],
            &[0, 1],
            TaskType::Classification,
        )
        .unwrap();
        assert_eq!(tape.scalar(l), 0.0);
        let g = tape.backward(l).unwrap();
        assert_eq!(
            g.get(crate::tensor::ParamId(0)).unwrap().frobenius_sq(),
            0.0
        );
    }

    #[test]
    fn masked_loss_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let s = 5;
            let logits: Vec<f64> = (0..3).map(|_| rng.random_range(-3.0..3.0)).collect();
            let label: Vec<f64> = (0..s)
                .map(|_| if rng.random::<bool>() { 1.0 } else { 0.0 })
                .collect();
            let mut mask: Vec<bool> = (0..s).map(|_| rng.random::<bool>()).collect();
            mask[1] = true;
            let ids = [1, 2, 4];
            let mut tape = GradTape::new();
            let z = tape.constant(Matrix::row_vector(&logits));
            let l =
                masked_loss(&mut tape, z, &label, &mask, &ids, TaskType::Classification).unwrap();
            let mut terms = Vec::new();
            for (c, &t) in ids.iter().enumerate() {
                if mask[t] {
                    let p = 1.0 / (1.0 + (-logits[c]).exp());
                    terms.push(-(label[t] * p.ln() + (1.0 - label[t]) * (1.0 - p).ln()));
                }
            }
            let expect = terms.iter().sum::<f64>() / terms.len() as f64;
            assert!((tape.scalar(l) - expect).abs() < 1e-12);

            let mut tape = GradTape::new();
            let z = tape.constant(Matrix::row_vector(&logits));
            let l = masked_loss(&mut tape, z, &label, &mask, &ids, TaskType::Regression).unwrap();
            let mut sq = Vec::new();
            for (c, &t) in ids.iter().enumerate() {
                if mask[t] {
                    sq.push((logits[c] - label[t]).powi(2));
                }
            }
            assert!((tape.scalar(l) - sq.iter().sum::<f64>() / sq.len() as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn regularizer_identity_head() {
        let cfg = MtlConfig::default();
        let omega = TaskCovariance::uniform(&[0, 1]).unwrap();
        let v = regularizer_value(&Matrix::identity(2), &omega, &cfg).unwrap();
        // ε_psd shifts the inverse by a relative 2e-6
        assert!((v - 0.002).abs() < 1e-8);
        let zero = MtlConfig {
            lambda1: 0.0,
            ..MtlConfig::default()
        };
        assert_eq!(
            regularizer_value(&Matrix::identity(2), &omega, &zero).unwrap(),
            0.0
        );
    }

    #[test]
    fn regularizer_matches_dense_trace() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = MtlConfig {
            lambda1: 0.7,
            lambda_chi: GroupWeights {
                task: 0.3,
                ..GroupWeights::default()
            },
            ..MtlConfig::default()
        };
        for _ in 0..10 {
            let phi = rand_matrix(4, 3, &mut rng);
            let omega = random_cov(&[0, 1, 2], &mut rng);
            let inv = regularized_inverse(&omega.omega, cfg.epsilon_psd).unwrap();
            let mut tr = 0.0;
            for r in 0..4 {
                for a in 0..3 {
                    for b in 0..3 {
                        tr += phi.get(r, a) * inv.get(a, b) * phi.get(r, b);
                    }
                }
            }
            let expect = 0.5 * 0.7 * tr + 0.5 * 0.3 * phi.frobenius_sq();
            let got = regularizer_value(&phi, &omega, &cfg).unwrap();
            assert!((got - expect).abs() < 1e-10 * expect.abs().max(1.0));
        }
    }

    #[test]
    fn regularizer_rejects_non_psd() {
        let bad = TaskCovariance {
            omega: Matrix::diag(&[1.5, -0.5]),
            task_ids: vec![0, 1],
        };
        assert!(matches!(
            regularizer_value(&Matrix::identity(2), &bad, &MtlConfig::default()),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn grad_head_without_regularization_is_loss_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dl = rand_matrix(3, 2, &mut rng);
        let phi = rand_matrix(3, 2, &mut rng);
        let omega = TaskCovariance::uniform(&[0, 1]).unwrap();
        let cfg = MtlConfig {
            lambda1: 0.0,
            ..MtlConfig::default()
        };
        assert_eq!(
            grad_task_head(&dl, &phi, &[0, 1], &[(&omega, 5)], &cfg).unwrap(),
            dl
        );
    }

    #[test]
    fn grad_head_single_client_literal_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = 3;
        let phi = rand_matrix(4, s, &mut rng);
        let omega = TaskCovariance::uniform(&[0, 1, 2]).unwrap();
        let cfg = MtlConfig {
            lambda1: 0.25,
            epsilon_psd: 1e-12,
            unnormalized_sample_weights: true,
            ..MtlConfig::default()
        };
        let n = 10;
        let g =
            grad_task_head(&Matrix::zeros(4, s), &phi, &[0, 1, 2], &[(&omega, n)], &cfg).unwrap();
        let expect = phi.scale(0.25 * s as f64 / n as f64);
        assert!(g.max_abs_diff(&expect) < 1e-10);
        let normalized = MtlConfig {
            unnormalized_sample_weights: false,
            ..cfg
        };
        let g = grad_task_head(
            &Matrix::zeros(4, s),
            &phi,
            &[0, 1, 2],
            &[(&omega, n)],
            &normalized,
        )
        .unwrap();
        assert!(g.max_abs_diff(&phi.scale(0.25 * s as f64)).abs() < 1e-10);
    }

    #[test]
    fn grad_head_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = MtlConfig {
            lambda1: 0.4,
            lambda_chi: GroupWeights {
                task: 0.1,
                ..GroupWeights::default()
            },
            ..MtlConfig::default()
        };
        let ids = [0, 2, 3];
        let own = random_cov(&ids, &mut rng);
        let other = random_cov(&[2, 3, 5], &mut rng);
        let hood = [(&own, 7), (&other, 3)];
        let phi = rand_matrix(4, 3, &mut rng);
        let g = grad_task_head(&Matrix::zeros(4, 3), &phi, &ids, &hood, &cfg).unwrap();
        let h = 1e-6;
        for i in 0..phi.len() {
            let mut p = phi.clone();
            p.as_mut_slice()[i] += h;
            let up = neighborhood_regularizer(&p, &ids, &hood, &cfg).unwrap();
            p.as_mut_slice()[i] -= 2.0 * h;
            let down = neighborhood_regularizer(&p, &ids, &hood, &cfg).unwrap();
            let fd = (up - down) / (2.0 * h);
            let a = g.as_slice()[i];
            assert!(
                (a - fd).abs() / (a.abs() + fd.abs() + 1e-12) < 1e-6,
                "{a} vs {fd}"
            );
        }
    }

    #[test]
    fn grad_head_rejects_misaligned_head() {
        let omega = TaskCovariance::uniform(&[0, 1]).unwrap();
        let r = grad_task_head(
            &Matrix::zeros(2, 3),
            &Matrix::zeros(2, 3),
            &[0, 1],
            &[(&omega, 1)],
            &MtlConfig::default(),
        );
        assert!(matches!(r, Err(Error::Alignment(_))));
    }

    #[test]
    fn psd_sqrt_examples() {
        assert!(
            psd_sqrt(&Matrix::identity(3))
                .unwrap()
                .max_abs_diff(&Matrix::identity(3))
                < 1e-12
        );
        let r = psd_sqrt(&Matrix::diag(&[4.0, 9.0])).unwrap();
        assert!(r.max_abs_diff(&Matrix::diag(&[2.0, 3.0])) < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..10 {
            let a = rand_matrix(5, 5, &mut rng);
            let m = a.transpose().matmul(&a).unwrap();
            let r = psd_sqrt(&m).unwrap();
            assert!(r.matmul(&r).unwrap().max_abs_diff(&m) < 1e-8);
        }
        let asym = Matrix::from_rows(&[vec![1.0, 2.0], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(psd_sqrt(&asym), Err(Error::Validation(_))));
    }

    #[test]
    fn closed_form_examples() {
        // orthonormal columns
        let phi = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 0.0]]).unwrap();
        let o = omega_closed_form(&phi, &[0, 1]).unwrap();
        assert!(o.omega.max_abs_diff(&Matrix::identity(2).scale(0.5)) < 1e-12);
        // duplicated task column: ½·[[1,1],[1,1]]
        let phi = Matrix::from_rows(&[vec![3.0, 3.0], vec![0.0, 0.0]]).unwrap();
        let o = omega_closed_form(&phi, &[1, 4]).unwrap();
        assert!(o.omega.max_abs_diff(&Matrix::filled(2, 2, 0.5)) < 1e-12);
        assert!(matches!(
            omega_closed_form(&Matrix::zeros(3, 2), &[0, 1]),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn closed_form_beats_random_candidates() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5 {
            let phi = rand_matrix(8, 4, &mut rng);
            let ids = [0, 1, 2, 3];
            let best = omega_closed_form(&phi, &ids).unwrap();
            let obj = |o: &Matrix| quad_trace(&phi, &regularized_inverse(o, 0.0).unwrap()).unwrap();
            let v = obj(&best.omega);
            for _ in 0..50 {
                let cand = random_cov(&ids, &mut rng);
                assert!(obj(&cand.omega) >= v - 1e-8);
            }
        }
    }

    #[test]
    fn align_embed_and_extract() {
        let o = TaskCovariance::new(Matrix::filled(1, 1, 1.0), vec![3]).unwrap();
        let g = f_align(&o, 4).unwrap();
        let mut expect = Matrix::zeros(4, 4);
        expect.set(3, 3, 1.0);
        assert_eq!(g, expect);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let ids = [0, 2, 5];
        let cov = random_cov(&ids, &mut rng);
        assert_eq!(
            extract_aligned(&f_align(&cov, 6).unwrap(), &ids).unwrap(),
            cov.omega
        );
        let full = random_cov(&[0, 1, 2], &mut rng);
        assert_eq!(f_align(&full, 3).unwrap(), full.omega);
        let dup = TaskCovariance {
            omega: Matrix::identity(2).scale(0.5),
            task_ids: vec![1, 1],
        };
        assert!(matches!(f_align(&dup, 3), Err(Error::Validation(_))));
        assert!(matches!(f_align(&full, 2), Err(Error::Validation(_))));
    }

    #[test]
    fn isolated_update_is_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let ids = [0, 1, 2];
        let phi = rand_matrix(6, 3, &mut rng);
        let stale = TaskCovariance::uniform(&ids).unwrap();
        let cfg = MtlConfig::default();
        let up = omega_decentralized_update(0, &[(&stale, 12)], &phi, &ids, 3, &cfg).unwrap();
        let cf = omega_closed_form(&phi, &ids).unwrap();
        let projected = project_omega(&cf.omega, cfg.epsilon_psd).unwrap();
        assert!(up.omega.max_abs_diff(&projected) < 1e-12);
    }

    #[test]
    fn identical_clients_are_a_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let ids = [1, 2];
        let phi = rand_matrix(5, 2, &mut rng);
        let cf = omega_closed_form(&phi, &ids).unwrap();
        let cfg = MtlConfig::default();
        let up = omega_decentralized_update(1, &[(&cf, 4), (&cf, 9)], &phi, &ids, 3, &cfg).unwrap();
        assert!(up.omega.max_abs_diff(&cf.omega) < 1e-8);
    }

    #[test]
    fn update_output_is_a_valid_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for literal in [false, true] {
            let cfg = MtlConfig {
                unnormalized_sample_weights: literal,
                omega_lr: 0.3,
                ..MtlConfig::default()
            };
            let ids = [0, 1, 3];
            let a = random_cov(&[0, 1, 2], &mut rng);
            let b = random_cov(&[1, 3], &mut rng);
            let own = random_cov(&ids, &mut rng);
            let phi = rand_matrix(4, 3, &mut rng);
            let up =
                omega_decentralized_update(0, &[(&own, 3), (&a, 5), (&b, 8)], &phi, &ids, 4, &cfg)
                    .unwrap();
            up.validate().unwrap();
        }
        assert!(matches!(
            omega_decentralized_update(
                0,
                &[],
                &Matrix::identity(2),
                &[0, 1],
                2,
                &MtlConfig::default()
            ),
            Err(Error::Topology(_))
        ));
    }

    #[test]
    fn aligned_inverse_zero_outside_shared_tasks() {
        let cov = TaskCovariance::uniform(&[1, 2]).unwrap();
        let inv = aligned_inverse(&cov, &[0, 1, 3], 0.0).unwrap();
        let mut expect = Matrix::zeros(3, 3);
        // 1×1 block {task 1} of I/2 inverted
        expect.set(1, 1, 2.0);
        assert!(inv.max_abs_diff(&expect) < 1e-12);
    }
}
