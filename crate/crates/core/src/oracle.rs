//! Exact single-arm analysis for arms with known kernels.
//!
//! Given prices `λ_1..λ_H` an arm decomposes into its own discounted MDP in
//! which action `a` pays `λ_a` (idle is free). The partial index of resource
//! `h` at state `s` is the largest price `λ_h` at which the optimal policy
//! still picks `h` in `s`, holding the other prices fixed.

use serde::{Deserialize, Serialize};

use crate::env::{ActionId, ArmSpec};
use crate::matching::CapacityVector;
use crate::{Error, Result};

/// Default bound `M` on prices and indexes.
pub const DEFAULT_PRICE_BOUND: f64 = 100.0;

const VALUE_ITERATION_TOLERANCE: f64 = 1e-9;
const MAX_VALUE_ITERATIONS: usize = 200_000;
const MAX_POLICY_ITERATIONS: usize = 1_000;
/// Coarse grid resolution used to bracket a partial index.
const INDEX_SCAN_POINTS: usize = 33;
const BISECTION_STEPS: usize = 40;

/// Tabular single-arm MDP over state indices `0..num_states`.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmMdp {
    floor: usize,
    /// `transitions[s][a]` lists `(next_index, prob)`.
    transitions: Vec<Vec<Vec<(usize, f64)>>>,
    reward: Vec<Vec<f64>>,
    discount: f64,
}

impl ArmMdp {
    pub fn new(transitions: Vec<Vec<Vec<(usize, f64)>>>, reward: Vec<Vec<f64>>, discount: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&discount) {
            return Err(Error::InvalidConfig(format!("discount {discount} outside [0,1)")));
        }
        let num_states = transitions.len();
        let num_actions = transitions.first().map_or(0, Vec::len);
        if num_states == 0 || num_actions < 2 || reward.len() != num_states {
            return Err(Error::InvalidConfig("MDP needs states, at least two actions and a reward table".into()));
        }
        for (row, r) in transitions.iter().zip(&reward) {
            if row.len() != num_actions || r.len() != num_actions {
                return Err(Error::ShapeMismatch {
                    expected: num_actions,
                    got: row.len().min(r.len()),
                });
            }
            for dist in row {
                let total: f64 = dist.iter().map(|(_, p)| p).sum();
                if dist.iter().any(|&(s, p)| s >= num_states || p < 0.0) || (total - 1.0).abs() > 1e-12 {
                    return Err(Error::InvalidDistribution(format!("row sums to {total}")));
                }
            }
        }
        Ok(Self {
            floor: 0,
            transitions,
            reward,
            discount,
        })
    }

    /// Builds the tabular MDP of an arm with mean rewards `R(s, a)`.
    pub fn from_arm(spec: &ArmSpec, discount: f64) -> Result<Self> {
        spec.validate()?;
        let floor = spec.floor();
        let mut transitions = Vec::with_capacity(spec.num_states());
        let mut reward = Vec::with_capacity(spec.num_states());
        for s in spec.states() {
            let mut rows = Vec::with_capacity(spec.num_actions());
            let mut rewards = Vec::with_capacity(spec.num_actions());
            for a in 0..spec.num_actions() {
                let dist = spec.kernel(s, a)?;
                rows.push(dist.outcomes().iter().map(|&(n, p)| (n.value() - floor, p)).collect());
                rewards.push(spec.mean_reward(s, a)?);
            }
            transitions.push(rows);
            reward.push(rewards);
        }
        let mut mdp = Self::new(transitions, reward, discount)?;
        mdp.floor = floor;
        Ok(mdp)
    }

    pub fn num_states(&self) -> usize {
        self.transitions.len()
    }

    pub fn num_actions(&self) -> usize {
        self.transitions[0].len()
    }

    pub fn num_resources(&self) -> usize {
        self.num_actions() - 1
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    /// State value of index 0.
    pub fn floor(&self) -> usize {
        self.floor
    }

    pub fn state_index(&self, value: usize) -> Result<usize> {
        if value < self.floor || value - self.floor >= self.num_states() {
            return Err(Error::InvalidState {
                value,
                floor: self.floor,
                cap: self.floor + self.num_states() - 1,
            });
        }
        Ok(value - self.floor)
    }

    pub fn reward(&self, s: usize, a: ActionId) -> f64 {
        self.reward[s][a]
    }

    pub fn transitions(&self, s: usize, a: ActionId) -> &[(usize, f64)] {
        &self.transitions[s][a]
    }

    fn backup(&self, prices: &LambdaVector, s: usize, a: ActionId, values: &[f64]) -> f64 {
        let cont: f64 = self.transitions[s][a].iter().map(|&(n, p)| p * values[n]).sum();
        self.reward[s][a] - prices.price(a) + self.discount * cont
    }

    fn q_from_values(&self, prices: &LambdaVector, values: &[f64]) -> Vec<Vec<f64>> {
        (0..self.num_states())
            .map(|s| (0..self.num_actions()).map(|a| self.backup(prices, s, a, values)).collect())
            .collect()
    }
}

/// Resource prices `λ_1..λ_H` with bound `M`; the null resource is free.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaVector {
    values: Vec<f64>,
    bound: f64,
}

impl LambdaVector {
    pub fn new(values: Vec<f64>, bound: f64) -> Result<Self> {
        if !(bound > 0.0) {
            return Err(Error::InvalidConfig("price bound must be positive".into()));
        }
        if values.iter().any(|v| !v.is_finite() || v.abs() > bound) {
            return Err(Error::InvalidConfig(format!("prices {values:?} exceed bound {bound}")));
        }
        Ok(Self { values, bound })
    }

    pub fn zeros(num_resources: usize, bound: f64) -> Self {
        Self {
            values: vec![0.0; num_resources],
            bound,
        }
    }

    pub fn num_resources(&self) -> usize {
        self.values.len()
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Price of action `a`; zero for the null action.
    pub fn price(&self, a: ActionId) -> f64 {
        if a == 0 {
            0.0
        } else {
            self.values[a - 1]
        }
    }

    /// Copy with the price of resource `h` replaced by `y` (not checked
    /// against the bound).
    pub fn with_price(&self, h: ActionId, y: f64) -> Self {
        let mut out = self.clone();
        out.values[h - 1] = y;
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SolveMethod {
    /// Howard policy iteration with exact policy evaluation.
    #[default]
    PolicyIteration,
    /// Value iteration to a sup-norm step of `1e-9`.
    ValueIteration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArmSolution {
    /// `q[s][a]`.
    pub q: Vec<Vec<f64>>,
    /// Greedy policy with ties toward the larger action id.
    pub policy: Vec<ActionId>,
    pub iterations: usize,
}

impl ArmSolution {
    pub fn value(&self, s: usize) -> f64 {
        self.q[s].iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

fn tie_tolerance(q: &[Vec<f64>]) -> f64 {
    let scale = q.iter().flatten().fold(1.0f64, |m, v| m.max(v.abs()));
    1e-11 * scale
}

/// Argmax with ties (within `tol`) broken toward the larger action.
fn greedy_action(row: &[f64], tol: f64) -> ActionId {
    let best = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (0..row.len()).rev().find(|&a| row[a] >= best - tol).unwrap()
}

fn greedy_policy(q: &[Vec<f64>]) -> Vec<ActionId> {
    let tol = tie_tolerance(q);
    q.iter().map(|row| greedy_action(row, tol)).collect()
}

/// Solves `A x = b` by Gaussian elimination with partial pivoting.
fn solve_linear(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            if f != 0.0 {
                for k in col..n {
                    a[row][k] -= f * a[col][k];
                }
                b[row] -= f * b[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let tail: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - tail) / a[row][row];
    }
    x
}

/// State values of a fixed stationary policy.
fn policy_values(mdp: &ArmMdp, prices: &LambdaVector, policy: &[ActionId]) -> Vec<f64> {
    let n = mdp.num_states();
    let mut a = vec![vec![0.0; n]; n];
    let mut b = vec![0.0; n];
    for s in 0..n {
        let act = policy[s];
        a[s][s] += 1.0;
        for &(next, p) in mdp.transitions(s, act) {
            a[s][next] -= mdp.discount * p;
        }
        b[s] = mdp.reward(s, act) - prices.price(act);
    }
    solve_linear(a, b)
}

/// `Q^σ(s, a)`: take `a` once, then follow `policy`.
pub fn evaluate_policy(mdp: &ArmMdp, prices: &LambdaVector, policy: &[ActionId]) -> Result<Vec<Vec<f64>>> {
    check_prices(mdp, prices)?;
    if policy.len() != mdp.num_states() || policy.iter().any(|&a| a >= mdp.num_actions()) {
        return Err(Error::ShapeMismatch {
            expected: mdp.num_states(),
            got: policy.len(),
        });
    }
    let values = policy_values(mdp, prices, policy);
    Ok(mdp.q_from_values(prices, &values))
}

fn check_prices(mdp: &ArmMdp, prices: &LambdaVector) -> Result<()> {
    if prices.num_resources() != mdp.num_resources() {
        return Err(Error::ShapeMismatch {
            expected: mdp.num_resources(),
            got: prices.num_resources(),
        });
    }
    Ok(())
}

fn policy_iteration(mdp: &ArmMdp, prices: &LambdaVector, warm_start: Option<&[ActionId]>) -> Result<ArmSolution> {
    let mut policy: Vec<ActionId> = match warm_start {
        Some(p) => p.to_vec(),
        None => {
            let immediate: Vec<Vec<f64>> = (0..mdp.num_states())
                .map(|s| (0..mdp.num_actions()).map(|a| mdp.reward(s, a) - prices.price(a)).collect())
                .collect();
            greedy_policy(&immediate)
        }
    };
    for iteration in 1..=MAX_POLICY_ITERATIONS {
        let values = policy_values(mdp, prices, &policy);
        let q = mdp.q_from_values(prices, &values);
        let tol = tie_tolerance(&q);
        let mut changed = false;
        for (s, row) in q.iter().enumerate() {
            let best = greedy_action(row, tol);
            // switch only on strict improvement so the iteration cannot cycle
            if row[best] > row[policy[s]] + tol {
                policy[s] = best;
                changed = true;
            }
        }
        if !changed {
            let policy = greedy_policy(&q);
            return Ok(ArmSolution {
                q,
                policy,
                iterations: iteration,
            });
        }
    }
    Err(Error::NonConvergence {
        iterations: MAX_POLICY_ITERATIONS,
        residual: f64::NAN,
    })
}

fn value_iteration(mdp: &ArmMdp, prices: &LambdaVector) -> Result<ArmSolution> {
    let mut values = vec![0.0; mdp.num_states()];
    let mut q = mdp.q_from_values(prices, &values);
    let mut step = f64::INFINITY;
    for iteration in 1..=MAX_VALUE_ITERATIONS {
        values = q.iter().map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max)).collect();
        let next = mdp.q_from_values(prices, &values);
        step = next
            .iter()
            .flatten()
            .zip(q.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        q = next;
        if step <= VALUE_ITERATION_TOLERANCE {
            let policy = greedy_policy(&q);
            return Ok(ArmSolution {
                q,
                policy,
                iterations: iteration,
            });
        }
    }
    Err(Error::NonConvergence {
        iterations: MAX_VALUE_ITERATIONS,
        residual: step,
    })
}

/// Optimal state-action values of the priced single-arm problem.
pub fn solve_arm(mdp: &ArmMdp, prices: &LambdaVector) -> Result<ArmSolution> {
    solve_arm_with(mdp, prices, SolveMethod::default())
}

pub fn solve_arm_with(mdp: &ArmMdp, prices: &LambdaVector, method: SolveMethod) -> Result<ArmSolution> {
    check_prices(mdp, prices)?;
    match method {
        SolveMethod::PolicyIteration => policy_iteration(mdp, prices, None),
        SolveMethod::ValueIteration => value_iteration(mdp, prices),
    }
}

/// Sup-norm Bellman optimality residual of `q`.
pub fn bellman_residual(mdp: &ArmMdp, prices: &LambdaVector, q: &[Vec<f64>]) -> f64 {
    let values: Vec<f64> = q.iter().map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max)).collect();
    let backed = mdp.q_from_values(prices, &values);
    backed
        .iter()
        .flatten()
        .zip(q.iter().flatten())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

/// Evaluates "does the optimal policy pick `h` at state `s`" along a price
/// sweep, reusing each solution's policy as the next warm start.
struct PriceProbe<'a> {
    mdp: &'a ArmMdp,
    prices: &'a LambdaVector,
    state: usize,
    resource: ActionId,
    warm: Option<Vec<ActionId>>,
}

impl PriceProbe<'_> {
    fn picks(&mut self, y: f64) -> Result<bool> {
        let priced = self.prices.with_price(self.resource, y);
        let sol = policy_iteration(self.mdp, &priced, self.warm.as_deref())?;
        let picked = sol.policy[self.state] == self.resource;
        self.warm = Some(sol.policy);
        Ok(picked)
    }
}

fn check_index_args(mdp: &ArmMdp, prices: &LambdaVector, state: usize, resource: ActionId) -> Result<()> {
    check_prices(mdp, prices)?;
    if state >= mdp.num_states() {
        return Err(Error::InvalidState {
            value: state,
            floor: 0,
            cap: mdp.num_states() - 1,
        });
    }
    if resource == 0 || resource > mdp.num_resources() {
        return Err(Error::ActionOutOfRange {
            action: resource,
            num_actions: mdp.num_actions(),
        });
    }
    Ok(())
}

fn is_down_closed(picks: &[bool]) -> bool {
    // once the choice is lost along increasing price it never returns
    picks.windows(2).all(|w| w[0] || !w[1])
}

/// Whether `{y : σ*_{[λ_{-h}, y]}(s) = h}` is down-closed on `grid`.
pub fn indexability_scan(
    mdp: &ArmMdp,
    state: usize,
    resource: ActionId,
    prices: &LambdaVector,
    grid: &[f64],
) -> Result<bool> {
    check_index_args(mdp, prices, state, resource)?;
    let mut sorted = grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut probe = PriceProbe {
        mdp,
        prices,
        state,
        resource,
        warm: None,
    };
    let picks = sorted.iter().map(|&y| probe.picks(y)).collect::<Result<Vec<_>>>()?;
    Ok(is_down_closed(&picks))
}

/// Partial index of resource `resource` at state index `state`, given the
/// other prices in `prices` (its own entry is ignored).
///
/// A coarse scan over `[-bound, bound]` brackets the switching price and
/// checks monotonicity; bisection then refines the bracket. Returns
/// `-bound` if `resource` is never picked and `bound` if always picked.
pub fn partial_index(mdp: &ArmMdp, state: usize, resource: ActionId, prices: &LambdaVector, bound: f64) -> Result<f64> {
    check_index_args(mdp, prices, state, resource)?;
    let mut probe = PriceProbe {
        mdp,
        prices,
        state,
        resource,
        warm: None,
    };
    let grid: Vec<f64> = (0..INDEX_SCAN_POINTS)
        .map(|i| -bound + 2.0 * bound * i as f64 / (INDEX_SCAN_POINTS - 1) as f64)
        .collect();
    let picks = grid.iter().map(|&y| probe.picks(y)).collect::<Result<Vec<_>>>()?;
    if !is_down_closed(&picks) {
        return Err(Error::NotIndexable {
            state: state + mdp.floor(),
            resource,
        });
    }
    let last_picked = match picks.iter().rposition(|&p| p) {
        None => return Ok(-bound),
        Some(i) if i == picks.len() - 1 => return Ok(bound),
        Some(i) => i,
    };
    let (mut lo, mut hi) = (grid[last_picked], grid[last_picked + 1]);
    for _ in 0..BISECTION_STEPS {
        let mid = 0.5 * (lo + hi);
        if probe.picks(mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Partial indexes `w[s][h-1]` of every state and resource, each computed
/// with the other resources' prices taken from `prices`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexTable {
    floor: usize,
    w: Vec<Vec<f64>>,
}

impl IndexTable {
    pub fn compute(mdp: &ArmMdp, prices: &LambdaVector, bound: f64) -> Result<Self> {
        let w = (0..mdp.num_states())
            .map(|s| {
                (1..=mdp.num_resources())
                    .map(|h| partial_index(mdp, s, h, prices, bound))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { floor: mdp.floor(), w })
    }

    pub fn from_rows(floor: usize, w: Vec<Vec<f64>>) -> Self {
        Self { floor, w }
    }

    /// Index of resource `h` at state value `value`.
    pub fn get(&self, value: usize, h: ActionId) -> f64 {
        self.w[value - self.floor][h - 1]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.w
    }

    pub fn floor(&self) -> usize {
        self.floor
    }
}

/// Fallback action when resource `exclude` is not taken: the largest other
/// resource whose index reaches its price, or idle.
pub fn sigma_prime(index_row: &[f64], prices: &[f64], exclude: ActionId) -> ActionId {
    (1..=index_row.len())
        .rev()
        .find(|&g| g != exclude && index_row[g - 1] >= prices[g - 1])
        .unwrap_or(0)
}

/// Projected price step `λ_h <- clamp(λ_h + ρ (count_h - C_h), 0, M)`.
pub fn lambda_gradient_update(prices: &LambdaVector, counts: &[usize], caps: &CapacityVector, step: f64) -> LambdaVector {
    let values = prices
        .values
        .iter()
        .zip(counts)
        .zip(&caps.0)
        .map(|((&l, &count), &cap)| (l + step * (count as f64 - cap as f64)).max(0.0).min(prices.bound))
        .collect();
    LambdaVector {
        values,
        bound: prices.bound,
    }
}
