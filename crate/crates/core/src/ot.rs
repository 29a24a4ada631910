//! Optimal-transport target assignment.
//!
//! Instance targets (plus one all-zero background target) act as suppliers,
//! the `K` sampled-point predictions as demanders of one unit each. Supplies
//! are derived from prediction/target IoUs, transport costs from Dice, and
//! the entropically regularised problem is solved by log-domain
//! Sinkhorn-Knopp scaling. Each prediction is then assigned the target that
//! transports the most mass to it.
//!
//! [`lp_oracle`] solves the same problem exactly by enumerating integral
//! plans; it exists to verify the solver at desk scale and must stay
//! independent of the Sinkhorn path.

use crate::error::{Error, Result};
use crate::mask::{self, MaskKind, MaskSet};
use crate::mat::Mat;
use crate::par;

/// Default entropic regularisation.
pub const DEFAULT_EPS: f64 = 0.1;
/// Default iteration cap.
pub const DEFAULT_MAX_ITER: usize = 500;
/// Default tolerance on the max marginal violation.
pub const DEFAULT_TOL: f64 = 1e-6;

/// Solver settings for [`assign_targets`].
#[derive(Debug, Clone, Copy)]
pub struct OtConfig {
    pub eps: f64,
    pub max_iter: usize,
    pub tol: f64,
    /// Binarise predictions before computing Dice costs (supplies always
    /// binarise, per the IoU definition).
    pub cost_binarize: bool,
}

impl Default for OtConfig {
    fn default() -> Self {
        OtConfig {
            eps: DEFAULT_EPS,
            max_iter: DEFAULT_MAX_ITER,
            tol: DEFAULT_TOL,
            cost_binarize: false,
        }
    }
}

/// A balanced transport problem: `(T+1) x K` nonnegative cost matrix, integer
/// supplies summing to `K`, unit demand per prediction.
#[derive(Debug, Clone)]
pub struct TransportProblem {
    cost: Mat,
    supply: Vec<u32>,
    demand: Vec<f64>,
}

impl TransportProblem {
    pub fn new(cost: Mat, supply: Vec<u32>) -> Result<Self> {
        if cost.rows() != supply.len() {
            return Err(Error::invalid(format!(
                "cost has {} rows but supply has {} entries",
                cost.rows(),
                supply.len()
            )));
        }
        if cost.rows() == 0 || cost.cols() == 0 {
            return Err(Error::invalid("transport problem must be nonempty"));
        }
        if cost.data().iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid("cost matrix contains non-finite entries"));
        }
        if cost.data().iter().any(|c| *c < 0.0) {
            return Err(Error::invalid("cost matrix contains negative entries"));
        }
        let total: u64 = supply.iter().map(|s| *s as u64).sum();
        if total != cost.cols() as u64 {
            return Err(Error::invalid(format!(
                "supplies sum to {total}, expected K = {}",
                cost.cols()
            )));
        }
        let demand = vec![1.0; cost.cols()];
        Ok(TransportProblem { cost, supply, demand })
    }

    pub fn cost(&self) -> &Mat {
        &self.cost
    }

    pub fn supply(&self) -> &[u32] {
        &self.supply
    }

    pub fn demand(&self) -> &[f64] {
        &self.demand
    }

    pub fn n_targets(&self) -> usize {
        self.cost.rows()
    }

    pub fn n_predictions(&self) -> usize {
        self.cost.cols()
    }
}

/// A (possibly approximate) solution to a [`TransportProblem`].
#[derive(Debug, Clone)]
pub struct TransportPlan {
    pub plan: Mat,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl TransportPlan {
    /// Max absolute violation of the row (supply) and column (demand)
    /// marginals.
    pub fn marginal_violation(&self, problem: &TransportProblem) -> f64 {
        let mut worst = 0.0f64;
        for t in 0..self.plan.rows() {
            let sum: f64 = self.plan.row(t).iter().sum();
            worst = worst.max((sum - problem.supply()[t] as f64).abs());
        }
        for k in 0..self.plan.cols() {
            let sum: f64 = (0..self.plan.rows()).map(|t| self.plan.at(t, k)).sum();
            worst = worst.max((sum - 1.0).abs());
        }
        worst
    }
}

/// Calibrated target per sampled point. `target_of[k]` indexes rows of the
/// target set, with the last row (`T`) denoting background.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentResult {
    pub target_of: Vec<usize>,
    pub mass: Vec<f64>,
    pub is_background: Vec<bool>,
}

/// Per-target supply from prediction IoUs:
/// `mu_t = floor(sum_k IoU(binarize(pred_k), M_t))`, clamped so the running
/// total never exceeds `k_total`; the background slot takes the remainder.
///
/// Disjoint targets guarantee the per-prediction IoU sums stay below one, so
/// the clamp only ever fires on malformed (overlapping) target sets.
pub fn dynamic_supply(preds: &MaskSet, targets: &MaskSet, k_total: usize) -> Result<Vec<u32>> {
    if preds.len() != k_total {
        return Err(Error::invalid(format!(
            "prediction count {} does not match k_total {k_total}",
            preds.len()
        )));
    }
    let binarized: Vec<Vec<f64>> = preds.rows().map(mask::binarize_row).collect();
    let sums: Vec<f64> = par::map_indexed(targets.len(), |t| {
        let target = targets.row(t);
        binarized.iter().map(|p| mask::iou(p, target).expect("equal lengths")).sum()
    });
    let mut supply = Vec::with_capacity(targets.len() + 1);
    let mut used: u32 = 0;
    for s in sums {
        let mu = (s.floor() as u32).min(k_total as u32 - used);
        supply.push(mu);
        used += mu;
    }
    supply.push(k_total as u32 - used);
    Ok(supply)
}

/// `(T+1) x K` cost matrix: Dice loss against each foreground target, Dice on
/// complemented masks against the background row.
pub fn build_cost(preds: &MaskSet, targets: &MaskSet, cost_binarize: bool) -> Result<Mat> {
    if targets.kind() != MaskKind::Binary {
        return Err(Error::invalid("targets must be binary masks"));
    }
    if !targets.is_empty() && targets.n_points() != preds.n_points() {
        return Err(Error::invalid(format!(
            "targets cover {} points but predictions cover {}",
            targets.n_points(),
            preds.n_points()
        )));
    }
    let k = preds.len();
    let t_count = targets.len();
    let pred_rows: Vec<Vec<f64>> = if cost_binarize {
        preds.rows().map(mask::binarize_row).collect()
    } else {
        preds.rows().map(|r| r.to_vec()).collect()
    };
    let zeros = vec![0.0; preds.n_points()];
    let cost = Mat::map_rows(t_count + 1, k, |t| {
        if t < t_count {
            let target = targets.row(t);
            pred_rows
                .iter()
                .map(|p| mask::dice_loss(target, p).expect("equal lengths"))
                .collect()
        } else {
            pred_rows
                .iter()
                .map(|p| mask::background_cost(&zeros, p).expect("equal lengths"))
                .collect()
        }
    });
    Ok(cost)
}

/// Max-subtracted logsumexp over a pre-filled scratch slice.
fn logsumexp(vals: &[f64]) -> f64 {
    let m = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + vals.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Recheck marginals every this many scaling rounds; degenerate instances
/// need large iteration counts and the check costs a full matrix pass.
const CHECK_EVERY: usize = 16;

/// Log-domain Sinkhorn-Knopp scaling for the entropically regularised
/// problem. The plan is `diag(a) exp(-C/eps) diag(b)` held as dual
/// potentials (in exponent units), so zero supplies and tiny `eps` stay
/// finite under max-subtraction. Iteration stops when the max marginal
/// violation drops below `tol` or at `max_iter`; the last iterate is
/// returned either way, with `converged` reporting which.
pub fn sinkhorn(
    problem: &TransportProblem,
    eps: f64,
    max_iter: usize,
    tol: f64,
) -> Result<TransportPlan> {
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::invalid(format!("sinkhorn eps must be positive, got {eps}")));
    }
    let rows = problem.n_targets();
    let cols = problem.n_predictions();
    // Work with scaled costs W = C / eps and potentials phi = f / eps,
    // gamma = g / eps; plan_tk = exp(phi_t + gamma_k - W_tk).
    let mut w = problem.cost().clone();
    for v in w.data_mut() {
        *v /= eps;
    }
    // Zero-supply rows carry -inf potentials and transport nothing.
    let log_mu: Vec<f64> = problem
        .supply()
        .iter()
        .map(|s| if *s == 0 { f64::NEG_INFINITY } else { (*s as f64).ln() })
        .collect();

    let mut phi: Vec<f64> = log_mu
        .iter()
        .map(|lm| if *lm == f64::NEG_INFINITY { f64::NEG_INFINITY } else { 0.0 })
        .collect();
    let mut gamma = vec![0.0f64; cols];
    let mut scratch = vec![0.0f64; rows.max(cols)];

    let row_violation = |phi: &[f64], gamma: &[f64]| -> f64 {
        let mut worst = 0.0f64;
        for t in 0..rows {
            if phi[t] == f64::NEG_INFINITY {
                continue;
            }
            let wr = w.row(t);
            let sum: f64 = (0..cols).map(|k| (phi[t] + gamma[k] - wr[k]).exp()).sum();
            worst = worst.max((sum - problem.supply()[t] as f64).abs());
        }
        worst
    };

    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iter {
        iterations += 1;
        // Row scaling: exact supply marginals given gamma.
        for t in 0..rows {
            if log_mu[t] == f64::NEG_INFINITY {
                continue;
            }
            let wr = w.row(t);
            for k in 0..cols {
                scratch[k] = gamma[k] - wr[k];
            }
            phi[t] = log_mu[t] - logsumexp(&scratch[..cols]);
        }
        // Column scaling: exact demand marginals given phi.
        for k in 0..cols {
            for t in 0..rows {
                scratch[t] = phi[t] - w.at(t, k);
            }
            gamma[k] = -logsumexp(&scratch[..rows]);
        }
        // After the column update only row marginals can be violated.
        if iterations % CHECK_EVERY == 0 || iterations == max_iter {
            if row_violation(&phi, &gamma) <= tol {
                converged = true;
                break;
            }
        }
    }
    if !converged && row_violation(&phi, &gamma) <= tol {
        converged = true;
    }

    let mut plan = Mat::zeros(rows, cols);
    for t in 0..rows {
        if phi[t] == f64::NEG_INFINITY {
            continue;
        }
        let wr = w.row(t);
        let out = plan.row_mut(t);
        for k in 0..cols {
            out[k] = (phi[t] + gamma[k] - wr[k]).exp();
        }
    }
    let objective = objective_of(problem.cost(), &plan);
    Ok(TransportPlan { plan, objective, iterations, converged })
}

fn objective_of(cost: &Mat, plan: &Mat) -> f64 {
    cost.data().iter().zip(plan.data()).map(|(c, u)| c * u).sum()
}

/// Hard size bounds for the enumeration oracle.
pub const ORACLE_MAX_TARGETS: usize = 8;
pub const ORACLE_MAX_PREDICTIONS: usize = 10;

/// Exact minimiser by exhaustive enumeration of integral plans.
///
/// With unit demands and integer supplies the problem has an integral
/// optimum in which every prediction receives its whole unit from a single
/// target, so searching over per-column target choices with exact row counts
/// covers all vertices of the feasible polytope. Depth-first with a partial
/// cost bound; correctness over speed at the supported sizes.
pub fn lp_oracle(problem: &TransportProblem) -> Result<TransportPlan> {
    let rows = problem.n_targets();
    let cols = problem.n_predictions();
    if rows > ORACLE_MAX_TARGETS || cols > ORACLE_MAX_PREDICTIONS {
        return Err(Error::UnsupportedSize(format!(
            "lp_oracle supports up to {ORACLE_MAX_TARGETS} targets x {ORACLE_MAX_PREDICTIONS} predictions, got {rows} x {cols}"
        )));
    }
    let cost = problem.cost();
    let mut remaining: Vec<u32> = problem.supply().to_vec();
    let mut assign = vec![usize::MAX; cols];
    let mut best_assign = None;
    let mut best_cost = f64::INFINITY;
    let mut visited = 0usize;

    fn dfs(
        k: usize,
        cols: usize,
        rows: usize,
        cost: &Mat,
        remaining: &mut [u32],
        partial: f64,
        assign: &mut [usize],
        best_cost: &mut f64,
        best_assign: &mut Option<Vec<usize>>,
        visited: &mut usize,
    ) {
        if partial >= *best_cost {
            return; // cannot improve: costs are nonnegative
        }
        if k == cols {
            *visited += 1;
            *best_cost = partial;
            *best_assign = Some(assign.to_vec());
            return;
        }
        for t in 0..rows {
            if remaining[t] == 0 {
                continue;
            }
            remaining[t] -= 1;
            assign[k] = t;
            dfs(
                k + 1,
                cols,
                rows,
                cost,
                remaining,
                partial + cost.at(t, k),
                assign,
                best_cost,
                best_assign,
                visited,
            );
            remaining[t] += 1;
        }
    }

    dfs(
        0,
        cols,
        rows,
        cost,
        &mut remaining,
        0.0,
        &mut assign,
        &mut best_cost,
        &mut best_assign,
        &mut visited,
    );

    let chosen = best_assign.expect("a feasible plan always exists when supplies sum to K");
    let mut plan = Mat::zeros(rows, cols);
    for (k, t) in chosen.iter().enumerate() {
        *plan.at_mut(*t, k) = 1.0;
    }
    let objective = objective_of(cost, &plan);
    Ok(TransportPlan { plan, objective, iterations: visited, converged: true })
}

/// Per-prediction argmax over the plan column; ties break toward the lowest
/// target index, biasing toward foreground.
pub fn extract_assignment(plan: &TransportPlan) -> AssignmentResult {
    let rows = plan.plan.rows();
    let cols = plan.plan.cols();
    let background = rows.saturating_sub(1);
    let mut target_of = Vec::with_capacity(cols);
    let mut mass = Vec::with_capacity(cols);
    let mut is_background = Vec::with_capacity(cols);
    for k in 0..cols {
        let mut best_t = 0usize;
        let mut best_mass = f64::NEG_INFINITY;
        for t in 0..rows {
            let m = plan.plan.at(t, k);
            if m > best_mass {
                best_mass = m;
                best_t = t;
            }
        }
        target_of.push(best_t);
        mass.push(best_mass);
        is_background.push(best_t == background);
    }
    AssignmentResult { target_of, mass, is_background }
}

/// Full assignment pipeline with intermediate artifacts, used by the debug
/// dump: supplies -> cost -> Sinkhorn -> argmax extraction.
pub fn solve_assignment(
    preds: &MaskSet,
    targets: &MaskSet,
    cfg: &OtConfig,
) -> Result<(TransportProblem, TransportPlan, AssignmentResult)> {
    let k = preds.len();
    if k == 0 {
        return Err(Error::invalid("assignment needs at least one prediction"));
    }
    let supply = dynamic_supply(preds, targets, k)?;
    let cost = build_cost(preds, targets, cfg.cost_binarize)?;
    let problem = TransportProblem::new(cost, supply)?;
    let plan = sinkhorn(&problem, cfg.eps, cfg.max_iter, cfg.tol)?;
    let assignment = extract_assignment(&plan);
    Ok((problem, plan, assignment))
}

/// End-to-end target assignment (Appendix procedure). With no foreground
/// targets every prediction is assigned background without solving.
pub fn assign_targets(preds: &MaskSet, targets: &MaskSet, cfg: &OtConfig) -> Result<AssignmentResult> {
    let k = preds.len();
    if k == 0 {
        return Err(Error::invalid("assignment needs at least one prediction"));
    }
    if targets.is_empty() {
        return Ok(AssignmentResult {
            target_of: vec![0; k],
            mass: vec![1.0; k],
            is_background: vec![true; k],
        });
    }
    let (_, _, assignment) = solve_assignment(preds, targets, cfg)?;
    Ok(assignment)
}
